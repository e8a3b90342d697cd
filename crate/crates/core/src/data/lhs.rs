use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Latin hypercube sample of `n` points in an axis-aligned box: along every
/// dimension each of the `n` equal-width strata holds exactly one point,
/// jittered uniformly within its stratum.
pub fn latin_hypercube(n: usize, bounds: &[(f64, f64)], seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(Error::Config("latin hypercube needs n >= 1".into()));
    }
    if let Some((lo, hi)) = bounds.iter().find(|(lo, hi)| !(lo < hi)) {
        return Err(Error::Config(format!("empty sampling interval [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Array2::zeros((n, bounds.len()));
    for (d, (lo, hi)) in bounds.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(&mut rng);
        for (i, s) in strata.into_iter().enumerate() {
            let u: f64 = rng.random();
            out[[i, d]] = lo + (hi - lo) * (s as f64 + u) / n as f64;
        }
    }
    Ok(out)
}
