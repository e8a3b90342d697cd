//! Online adaptation of a meta-learned inverse map from measured outputs.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MapParams;
use crate::sim::{SystemModel, Trajectory};
use crate::train::adapt_inner;

/// Shortest sampling period that yields `n_batch * n_adapt` samples.
pub fn t_init_min(n_batch: usize, n_adapt: usize, dt: f64) -> f64 {
    (n_batch * n_adapt) as f64 * dt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Minimum,
    MinimumDelayed,
    WindowRandom,
    WindowRandomDelayed,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Minimum,
        StrategyKind::MinimumDelayed,
        StrategyKind::WindowRandom,
        StrategyKind::WindowRandomDelayed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Minimum => "minimum",
            StrategyKind::MinimumDelayed => "minimum-delayed",
            StrategyKind::WindowRandom => "window-random",
            StrategyKind::WindowRandomDelayed => "window-random-delayed",
        }
    }

    pub fn is_delayed(self) -> bool {
        matches!(self, StrategyKind::MinimumDelayed | StrategyKind::WindowRandomDelayed)
    }

    pub fn is_window(self) -> bool {
        matches!(self, StrategyKind::WindowRandom | StrategyKind::WindowRandomDelayed)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampling strategy {s:?}")))
    }
}

/// Where adaptation samples are drawn from: after `delay` seconds, either
/// the first consecutive samples or uniformly from a window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingStrategy {
    pub kind: StrategyKind,
    pub window_length: f64,
    pub delay: f64,
}

impl SamplingStrategy {
    /// Delayed kinds wait `-tau`; the others start at `t = 0`.
    pub fn new(kind: StrategyKind, window_length: f64, tau: f64) -> Result<Self> {
        let delay = if kind.is_delayed() { -tau } else { 0.0 };
        let s = Self { kind, window_length, delay };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay >= 0.0 && self.delay.is_finite()) {
            return Err(Error::Config(format!("sampling delay must be >= 0, got {}", self.delay)));
        }
        if self.kind.is_window() && !(self.window_length > 0.0 && self.window_length.is_finite()) {
            return Err(Error::Config(format!(
                "window length must be positive, got {}",
                self.window_length
            )));
        }
        Ok(())
    }
}

/// Adaptation batches in time order with the trajectory indices they use.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub batches: Vec<(Array2<f64>, Array2<f64>)>,
    pub indices: Vec<usize>,
    /// Length of the sampling period that was read.
    pub t_init: f64,
}

fn step_of(times: &[f64]) -> Result<f64> {
    match times {
        [a, b, ..] if b > a => Ok(b - a),
        [_, _, ..] => Err(Error::InvalidState("trajectory time must increase".into())),
        _ => Err(Error::InsufficientData("trajectory needs at least two samples".into())),
    }
}

/// First sample index at or after time `t` on a grid of step `dt`.
fn index_at(t: f64, dt: f64) -> usize {
    (t / dt - 1e-9).ceil().max(0.0) as usize
}

/// Picks `n_batch * n_adapt` samples of `(z, y)` and chunks them into
/// `n_adapt` batches of `n_batch` rows.
pub fn select_samples(
    strategy: &SamplingStrategy,
    z_traj: &Trajectory,
    y: &Array2<f64>,
    n_batch: usize,
    n_adapt: usize,
    seed: u64,
) -> Result<Selection> {
    strategy.validate()?;
    if y.nrows() != z_traj.len() {
        return Err(Error::shape("select_samples", "outputs and trajectory differ in length"));
    }
    let total = n_batch * n_adapt;
    if total == 0 {
        return Ok(Selection { batches: vec![], indices: vec![], t_init: 0.0 });
    }
    let dt = step_of(&z_traj.times)?;
    let horizon = (z_traj.len() - 1) as f64 * dt;
    let first = index_at(strategy.delay, dt);
    let (candidates, t_init) = if strategy.kind.is_window() {
        let min = t_init_min(n_batch, n_adapt, dt);
        if strategy.window_length < min {
            return Err(Error::Config(format!(
                "window length {} is shorter than the minimum sampling period {min}",
                strategy.window_length
            )));
        }
        let last = ((strategy.delay + strategy.window_length) / dt + 1e-9).floor() as usize;
        if last >= z_traj.len() {
            return Err(Error::InsufficientData(format!(
                "trajectory covers {horizon} s but the strategy needs {} s",
                strategy.delay + strategy.window_length
            )));
        }
        let window: Vec<usize> = (first..=last).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, window.len(), total)
            .into_iter()
            .map(|i| window[i])
            .collect();
        picked.sort_unstable();
        (picked, window.len() as f64 * dt)
    } else {
        if first + total > z_traj.len() {
            return Err(Error::InsufficientData(format!(
                "trajectory covers {horizon} s but the strategy needs {} s",
                (first + total - 1) as f64 * dt
            )));
        }
        ((first..first + total).collect(), total as f64 * dt)
    };
    let batches = candidates
        .chunks(n_batch)
        .map(|c| (z_traj.states.select(Axis(0), c), y.select(Axis(0), c)))
        .collect();
    Ok(Selection { batches, indices: candidates, t_init })
}

#[derive(Debug, Clone)]
pub struct AdaptationRun {
    pub eta_adapted: MapParams,
    pub samples_used: Vec<usize>,
    pub t_init_actual: f64,
    /// `L_y` on each batch before its update.
    pub loss_trace: Vec<f64>,
}

/// Runs the inner-loop updates on a copy of `eta` with rate `alpha`, using
/// samples of the running observer state and the measured output.
#[allow(clippy::too_many_arguments)]
pub fn online_adapt(
    eta: &MapParams,
    alpha: f64,
    z_traj: &Trajectory,
    y: &Array2<f64>,
    strategy: &SamplingStrategy,
    n_batch: usize,
    n_adapt: usize,
    seed: u64,
    model: &dyn SystemModel,
) -> Result<AdaptationRun> {
    let sel = select_samples(strategy, z_traj, y, n_batch, n_adapt, seed)?;
    let (eta_adapted, loss_trace) = adapt_inner(eta, alpha, &sel.batches, model)?;
    Ok(AdaptationRun {
        eta_adapted,
        samples_used: sel.indices,
        t_init_actual: sel.t_init,
        loss_trace,
    })
}
