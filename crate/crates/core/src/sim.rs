//! Nonlinear plant models and fixed-step RK4 integration.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// Default state-norm bound beyond which integration is aborted.
pub const DEFAULT_DIVERGENCE_BOUND: f64 = 1e6;

/// Autonomous plant `x' = f(x)`, `y = h(x)`.
pub trait SystemModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn rhs(&self, x: &[f64]) -> Result<Vec<f64>>;
    fn output(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// The output map applied to a batch of state rows on an autodiff graph.
    fn output_on_graph<'g>(&self, x: Var<'g>) -> Result<Var<'g>>;

    fn rhs_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.state_dim()));
        for (i, row) in x.rows().into_iter().enumerate() {
            let d = self.rhs(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&d));
        }
        Ok(out)
    }

    fn output_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.output_dim()));
        for (i, row) in x.rows().into_iter().enumerate() {
            let y = self.output(&row.to_vec())?;
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&y));
        }
        Ok(out)
    }
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite {what}: {x:?}")))
    }
}

/// Duffing variant `x' = lambda * [x2^3, -x1]`.
pub fn duffing_rhs(x: &[f64], lambda: f64) -> Result<[f64; 2]> {
    if x.len() != 2 {
        return Err(Error::shape("duffing_rhs", format!("state of length {}", x.len())));
    }
    check_finite(x, "state")?;
    if !lambda.is_finite() {
        return Err(Error::InvalidState(format!("non-finite lambda {lambda}")));
    }
    Ok([lambda * x[1].powi(3), -lambda * x[0]])
}

/// Measured output `y = x1`.
pub fn duffing_output(x: &[f64]) -> Result<[f64; 1]> {
    if x.len() != 2 {
        return Err(Error::shape("duffing_output", format!("state of length {}", x.len())));
    }
    Ok([x[0]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Duffing {
    pub lambda: f64,
}

impl Duffing {
    pub fn new(lambda: f64) -> Self {
        Self { lambda }
    }

    /// First integral `x1^2/2 + x2^4/4`, conserved for every lambda.
    pub fn first_integral(x: &[f64]) -> f64 {
        0.5 * x[0] * x[0] + 0.25 * x[1].powi(4)
    }
}

impl SystemModel for Duffing {
    fn state_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn rhs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(duffing_rhs(x, self.lambda)?.to_vec())
    }

    fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(duffing_output(x)?.to_vec())
    }

    fn output_on_graph<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        x.slice_cols(0, 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimGrid {
    pub t0: f64,
    /// Negative for backward integration.
    pub dt: f64,
    pub n_steps: usize,
}

impl SimGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if dt == 0.0 || !dt.is_finite() {
            return Err(Error::Config(format!("step size must be finite and nonzero, got {dt}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("grid needs at least one step".into()));
        }
        Ok(Self { t0, dt, n_steps })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps)
            .map(|k| self.t0 + k as f64 * self.dt)
            .collect()
    }
}

/// Sampled states, one row per timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Array2<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, k: usize) -> Vec<f64> {
        self.states.row(k).to_vec()
    }

    pub fn last(&self) -> Vec<f64> {
        self.state(self.len() - 1)
    }

    /// Same samples in reverse time order.
    pub fn reversed(&self) -> Trajectory {
        let times = self.times.iter().rev().copied().collect();
        let states = self.states.slice(ndarray::s![..;-1, ..]).to_owned();
        Trajectory { times, states }
    }
}

/// One classical fourth-order Runge-Kutta step of `x' = rhs(t, x)`.
pub fn rk4_step<F>(mut rhs: F, x: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    if dt == 0.0 {
        return Err(Error::Config("RK4 step size must be nonzero".into()));
    }
    let stage = |base: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        base.iter().zip(k).map(|(b, k)| b + h * k).collect()
    };
    let k1 = rhs(t, x)?;
    let k2 = rhs(t + 0.5 * dt, &stage(x, &k1, 0.5 * dt))?;
    let k3 = rhs(t + 0.5 * dt, &stage(x, &k2, 0.5 * dt))?;
    let k4 = rhs(t + dt, &stage(x, &k3, dt))?;
    let next: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite(&next, "RK4 result")?;
    Ok(next)
}

/// Integrates a time-dependent field over `grid`, failing once the state norm
/// exceeds `bound`.
pub fn integrate<F>(mut rhs: F, x0: &[f64], grid: &SimGrid, bound: f64) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let times = grid.times();
    let mut states = Array2::zeros((grid.n_steps + 1, x0.len()));
    states.row_mut(0).assign(&ndarray::ArrayView1::from(x0));
    let mut x = x0.to_vec();
    for step in 0..grid.n_steps {
        x = rk4_step(&mut rhs, &x, times[step], grid.dt).map_err(|e| match e {
            Error::InvalidState(reason) => Error::Integration {
                step: step + 1,
                reason,
            },
            other => other,
        })?;
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > bound {
            return Err(Error::Divergence {
                step: step + 1,
                norm,
                bound,
            });
        }
        states
            .row_mut(step + 1)
            .assign(&ndarray::ArrayView1::from(&x));
    }
    Ok(Trajectory { times, states })
}

/// Simulates `model` from `x0`; a negative `grid.dt` integrates backward in time.
pub fn simulate(model: &dyn SystemModel, x0: &[f64], grid: &SimGrid) -> Result<Trajectory> {
    simulate_with_bound(model, x0, grid, DEFAULT_DIVERGENCE_BOUND)
}

pub fn simulate_with_bound(
    model: &dyn SystemModel,
    x0: &[f64],
    grid: &SimGrid,
    bound: f64,
) -> Result<Trajectory> {
    if x0.len() != model.state_dim() {
        return Err(Error::shape(
            "simulate",
            format!("x0 has length {}, model expects {}", x0.len(), model.state_dim()),
        ));
    }
    integrate(|_, x| model.rhs(x), x0, grid, bound)
}

/// Additive i.i.d. Gaussian perturbations of sampled states and outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Variance per state component.
    pub var_x: f64,
    /// Variance per output component.
    pub var_y: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            var_x: 0.0,
            var_y: 0.0,
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.var_x == 0.0 && self.var_y == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.var_x >= 0.0 && self.var_y >= 0.0) {
            return Err(Error::Config(format!(
                "noise variances must be nonnegative, got var_x={} var_y={}",
                self.var_x, self.var_y
            )));
        }
        Ok(())
    }
}

fn perturb(values: &mut Array2<f64>, variance: f64, rng: &mut ChaCha8Rng) {
    if variance == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    values.iter_mut().for_each(|v| *v += normal.sample(rng));
}

/// Adds noise post hoc to a sampled trajectory and its outputs. Zero variances
/// leave the corresponding input bit-identical.
pub fn apply_noise(
    traj: &Trajectory,
    y: &Array2<f64>,
    noise: &NoiseSpec,
) -> Result<(Trajectory, Array2<f64>)> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut states = traj.states.clone();
    let mut y = y.clone();
    perturb(&mut states, noise.var_x, &mut rng);
    perturb(&mut y, noise.var_y, &mut rng);
    Ok((
        Trajectory {
            times: traj.times.clone(),
            states,
        },
        y,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay(_: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| -v).collect())
    }

    #[test]
    fn duffing_rhs_examples() {
        assert_eq!(duffing_rhs(&[0.5, 0.5], 1.0).unwrap(), [0.125, -0.5]);
        assert_eq!(duffing_rhs(&[0.0, 0.0], 3.0).unwrap(), [0.0, 0.0]);
        assert_eq!(duffing_rhs(&[1.0, 2.0], 2.0).unwrap(), [16.0, -2.0]);
        assert!(duffing_rhs(&[f64::NAN, 0.0], 1.0).is_err());
        assert!(duffing_rhs(&[1.0], 1.0).is_err());
    }

    #[test]
    fn duffing_output_examples() {
        assert_eq!(duffing_output(&[0.5, 0.5]).unwrap(), [0.5]);
        assert_eq!(duffing_output(&[0.0, 1.0]).unwrap(), [0.0]);
        assert_eq!(duffing_output(&[-2.0, 3.0]).unwrap(), [-2.0]);
    }

    #[test]
    fn rk4_step_examples() {
        // Stages for x' = -x, h = 0.1: k1=-1, k2=-0.95, k3=-0.9525, k4=-0.90475.
        let k = [-1.0, -0.95, -0.9525, -0.90475];
        let hand = 1.0 + 0.1 / 6.0 * (k[0] + 2.0 * k[1] + 2.0 * k[2] + k[3]);
        let x = rk4_step(decay, &[1.0], 0.0, 0.1).unwrap()[0];
        assert_abs_diff_eq!(x, hand, epsilon = 1e-15);
        assert_abs_diff_eq!(x, 0.904_837_5, epsilon = 1e-7);
        assert_abs_diff_eq!(x, (-0.1f64).exp(), epsilon = 1e-7);

        let back = rk4_step(decay, &[1.0], 0.0, -0.1).unwrap()[0];
        assert_abs_diff_eq!(back, 1.105_170_83, epsilon = 1e-7);

        let zero = rk4_step(|_, x| Ok(vec![0.0; x.len()]), &[3.25], 0.0, 0.7).unwrap();
        assert_eq!(zero, vec![3.25]);
        assert!(rk4_step(decay, &[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn single_step_simulation_equals_rk4_step() {
        let m = Duffing::new(1.3);
        let grid = SimGrid::new(0.0, 0.05, 1).unwrap();
        let traj = simulate(&m, &[0.4, -0.2], &grid).unwrap();
        let step = rk4_step(|_, x| m.rhs(x), &[0.4, -0.2], 0.0, 0.05).unwrap();
        assert_eq!(traj.last(), step);
        assert_eq!(traj.state(0), vec![0.4, -0.2]);
    }

    #[test]
    fn first_integral_is_conserved() {
        let m = Duffing::new(1.0);
        let x0 = [0.5, 0.5];
        let c0 = Duffing::first_integral(&x0);
        assert_eq!(c0, 0.140625);
        let traj = simulate(&m, &x0, &SimGrid::new(0.0, 0.01, 5000).unwrap()).unwrap();
        let drift = traj
            .states
            .rows()
            .into_iter()
            .map(|r| (Duffing::first_integral(&r.to_vec()) - c0).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
    }

    #[test]
    fn backward_then_forward_roundtrip() {
        let m = Duffing::new(1.0);
        let x0 = [0.5, 0.5];
        let back = simulate(&m, &x0, &SimGrid::new(0.0, -0.01, 5000).unwrap()).unwrap();
        assert!(back.times[1] < back.times[0]);
        let fwd = simulate(&m, &back.last(), &SimGrid::new(-50.0, 0.01, 5000).unwrap()).unwrap();
        let end = fwd.last();
        assert!((end[0] - x0[0]).abs() < 1e-8 && (end[1] - x0[1]).abs() < 1e-8, "{end:?}");
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let grid = SimGrid::new(0.0, 0.1, 1000).unwrap();
        let err = integrate(|_, x| Ok(x.iter().map(|v| 5.0 * v).collect()), &[1.0], &grid, 1e6)
            .unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!(step > 1 && step < 1000),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn zero_noise_is_bit_identical() {
        let m = Duffing::new(1.0);
        let traj = simulate(&m, &[0.5, 0.5], &SimGrid::new(0.0, 0.02, 50).unwrap()).unwrap();
        let y = m.output_rows(&traj.states).unwrap();
        let (t2, y2) = apply_noise(&traj, &y, &NoiseSpec { var_x: 0.0, var_y: 0.0, seed: 9 }).unwrap();
        assert_eq!(t2, traj);
        assert_eq!(y2, y);
    }

    #[test]
    fn noise_variance_and_determinism() {
        let n = 100_000;
        let traj = Trajectory {
            times: (0..n).map(|k| k as f64).collect(),
            states: Array2::zeros((n, 1)),
        };
        let y = Array2::zeros((n, 1));
        let spec = NoiseSpec { var_x: 0.0, var_y: 0.1, seed: 42 };
        let (_, noisy) = apply_noise(&traj, &y, &spec).unwrap();
        let mean = noisy.sum() / n as f64;
        let var = noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((0.095..=0.105).contains(&var), "variance {var}");
        let (_, again) = apply_noise(&traj, &y, &spec).unwrap();
        assert_eq!(noisy, again);
        assert!(apply_noise(&traj, &y, &NoiseSpec { var_x: -1.0, var_y: 0.0, seed: 0 }).is_err());
    }
}
