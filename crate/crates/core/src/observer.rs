//! The linear half of the KKL observer, `z' = A z + B y`, with diagonal Hurwitz
//! `A`, plus backward sampling of the steady-state initial condition
//! `z(0) = F(x(0))`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{self, SimGrid, SystemModel, Trajectory, DEFAULT_DIVERGENCE_BOUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverDesign {
    /// Diagonal of `A`; all entries negative.
    pub a_diag: Vec<f64>,
    /// Input vector `B`, one entry per latent coordinate.
    pub b: Vec<f64>,
    /// Slowest decay rate, `min |a_i|`.
    pub eig_min_abs: f64,
    /// Condition number of the eigenvector matrix; 1 for diagonal `A`.
    pub cond_v: f64,
}

impl ObserverDesign {
    pub fn new(a_diag: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a_diag.is_empty() || a_diag.len() != b.len() {
            return Err(Error::Config(format!(
                "A has {} entries, B has {}",
                a_diag.len(),
                b.len()
            )));
        }
        if let Some(a) = a_diag.iter().find(|a| !(**a < 0.0)) {
            return Err(Error::Config(format!("A is not Hurwitz: diagonal entry {a}")));
        }
        for (i, a) in a_diag.iter().enumerate() {
            if a_diag[..i].contains(a) {
                return Err(Error::Config(format!(
                    "(A, B) not controllable: repeated eigenvalue {a}"
                )));
            }
        }
        if b.iter().any(|v| *v == 0.0 || !v.is_finite()) {
            return Err(Error::Config("(A, B) not controllable: zero entry in B".into()));
        }
        let eig_min_abs = a_diag.iter().map(|a| a.abs()).fold(f64::INFINITY, f64::min);
        Ok(Self {
            a_diag,
            b,
            eig_min_abs,
            cond_v: 1.0,
        })
    }

    pub fn dz(&self) -> usize {
        self.a_diag.len()
    }

    /// Equilibrium of the filter for a constant output `y`: `-A^-1 B y`.
    pub fn steady_state(&self, y: f64) -> Vec<f64> {
        self.a_diag
            .iter()
            .zip(&self.b)
            .map(|(a, b)| -b * y / a)
            .collect()
    }

    /// Norm of the filter response to any output bounded by `sup_y`.
    pub fn response_bound(&self, sup_y: f64) -> f64 {
        self.a_diag
            .iter()
            .zip(&self.b)
            .map(|(a, b)| (b * sup_y / a).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `A = -diag(1, ..., dz)`, `B = 1`, `dz = 2 dx + 1`.
pub fn default_design(dx: usize) -> ObserverDesign {
    let dz = 2 * dx.max(1) + 1;
    let a_diag = (1..=dz).map(|i| -(i as f64)).collect();
    ObserverDesign::new(a_diag, vec![1.0; dz]).expect("default design is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardSamplingConfig {
    /// Steady-state tolerance on the latent norm.
    pub epsilon: f64,
    /// Assumed bound on `||z(tau)||`. When absent it is estimated from the
    /// output range of a pilot backward simulation.
    #[serde(default)]
    pub z_norm_bound: Option<f64>,
    /// Multiplier applied to the estimated bound.
    #[serde(default = "default_safety")]
    pub safety_factor: f64,
}

fn default_safety() -> f64 {
    2.0
}

impl Default for BackwardSamplingConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            z_norm_bound: None,
            safety_factor: default_safety(),
        }
    }
}

impl BackwardSamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if let Some(b) = self.z_norm_bound {
            if !(b > 0.0) {
                return Err(Error::Config(format!("z_norm_bound must be positive, got {b}")));
            }
        }
        if !(self.safety_factor > 0.0) {
            return Err(Error::Config("safety_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Horizon `tau <= 0` after which the homogeneous filter response from any
/// `||z(tau)|| <= z_norm_bound` has decayed below `epsilon`.
pub fn compute_tau(design: &ObserverDesign, epsilon: f64, z_norm_bound: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(z_norm_bound > 0.0) {
        return Err(Error::Config(format!("z_norm_bound must be positive, got {z_norm_bound}")));
    }
    let tau = (epsilon / (design.cond_v * z_norm_bound)).ln() / design.eig_min_abs;
    Ok(tau.min(0.0))
}

/// Right-hand side of the filter, `a o z + b y`.
pub fn observer_rhs(design: &ObserverDesign, z: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if z.len() != design.dz() {
        return Err(Error::shape(
            "observer_rhs",
            format!("z has length {}, design has dz={}", z.len(), design.dz()),
        ));
    }
    if y.len() != 1 {
        return Err(Error::shape(
            "observer_rhs",
            format!("B is a single column, output has length {}", y.len()),
        ));
    }
    Ok(design
        .a_diag
        .iter()
        .zip(&design.b)
        .zip(z)
        .map(|((a, b), z)| a * z + b * y[0])
        .collect())
}

/// Integrates the filter over sampled outputs (one row per step, spacing `dt`,
/// first sample at `t0`). Half-step stages use the linear interpolation of
/// neighbouring samples.
pub fn run_observer(
    design: &ObserverDesign,
    z0: &[f64],
    y_samples: &Array2<f64>,
    t0: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("observer step must be positive, got {dt}")));
    }
    if z0.len() != design.dz() {
        return Err(Error::shape(
            "run_observer",
            format!("z0 has length {}, design has dz={}", z0.len(), design.dz()),
        ));
    }
    if y_samples.ncols() != 1 || y_samples.nrows() == 0 {
        return Err(Error::shape(
            "run_observer",
            format!("expected n x 1 outputs, got {}x{}", y_samples.nrows(), y_samples.ncols()),
        ));
    }
    let n = y_samples.nrows();
    let mut states = Array2::zeros((n, design.dz()));
    states.row_mut(0).assign(&ndarray::ArrayView1::from(z0));
    let times: Vec<f64> = (0..n).map(|k| t0 + k as f64 * dt).collect();
    let mut z = z0.to_vec();
    for k in 0..n - 1 {
        let (y_now, y_next) = (y_samples[[k, 0]], y_samples[[k + 1, 0]]);
        let tk = times[k];
        z = sim::rk4_step(
            |t, z| {
                let frac = (t - tk) / dt;
                observer_rhs(design, z, &[y_now + frac * (y_next - y_now)])
            },
            &z,
            tk,
            dt,
        )
        .map_err(|e| match e {
            Error::InvalidState(reason) => Error::Integration { step: k + 1, reason },
            other => other,
        })?;
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > DEFAULT_DIVERGENCE_BOUND {
            return Err(Error::Divergence {
                step: k + 1,
                norm,
                bound: DEFAULT_DIVERGENCE_BOUND,
            });
        }
        states.row_mut(k + 1).assign(&ndarray::ArrayView1::from(&z));
    }
    Ok(Trajectory { times, states })
}

/// Result of backward sampling, re-indexed forward in time over `[tau, 0]`.
#[derive(Debug, Clone)]
pub struct BackwardSample {
    /// Steady-state latent initial condition `F(x(0))`.
    pub z0: Vec<f64>,
    pub x_traj: Trajectory,
    pub z_traj: Trajectory,
    /// Horizon actually used (a whole number of steps, `<=` the bound).
    pub tau: f64,
    pub z_norm_bound: f64,
}

/// Backward-samples `z(0) = F(x0)` with `z(tau) = 0`.
pub fn backward_sample_init(
    model: &dyn SystemModel,
    design: &ObserverDesign,
    x0: &[f64],
    cfg: &BackwardSamplingConfig,
    dt: f64,
) -> Result<BackwardSample> {
    backward_sample_from(model, design, x0, cfg, dt, &vec![0.0; design.dz()])
}

/// Backward sampling with an explicit filter state `z(tau)`.
pub fn backward_sample_from(
    model: &dyn SystemModel,
    design: &ObserverDesign,
    x0: &[f64],
    cfg: &BackwardSamplingConfig,
    dt: f64,
    z_tau: &[f64],
) -> Result<BackwardSample> {
    cfg.validate()?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("sampling step must be positive, got {dt}")));
    }
    let backward = |horizon: f64| -> Result<Trajectory> {
        let steps = ((-horizon) / dt - 1e-9).ceil().max(1.0) as usize;
        sim::simulate(model, x0, &SimGrid::new(0.0, -dt, steps)?)
    };

    let (bound, tau, x_back) = match cfg.z_norm_bound {
        Some(bound) => {
            let tau = compute_tau(design, cfg.epsilon, bound)?;
            (bound, tau, backward(tau)?)
        }
        None => {
            // Pilot horizon for a unit bound, then extend if the estimate needs more.
            let pilot_tau = compute_tau(design, cfg.epsilon, 1.0)?;
            let mut x_back = backward(pilot_tau)?;
            let sup_y = model
                .output_rows(&x_back.states)?
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            let bound = (cfg.safety_factor * design.response_bound(sup_y)).max(f64::MIN_POSITIVE);
            let tau = compute_tau(design, cfg.epsilon, bound)?;
            if tau < pilot_tau {
                x_back = backward(tau)?;
            }
            (bound, tau, x_back)
        }
    };

    let x_traj = x_back.reversed();
    let y = model.output_rows(&x_traj.states)?;
    let t_start = x_traj.times[0];
    let z_traj = run_observer(design, z_tau, &y, t_start, dt)?;
    let z0 = z_traj.last();
    Ok(BackwardSample {
        z0,
        tau: t_start.min(tau),
        x_traj,
        z_traj,
        z_norm_bound: bound,
    })
}
