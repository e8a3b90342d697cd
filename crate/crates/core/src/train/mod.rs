//! Training of the forward map `F_theta` and inverse map `F^-1_eta`:
//! parallel and sequential mixed-task learning (optionally physics-informed)
//! and meta-learning of the inverse map for output-driven adaptation.

mod losses;
mod meta;
mod optim;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::MixedDataset;
use crate::error::{Error, Result};
use crate::nn::{fit_normalization, forward, init_params, MapParams, MlpSpec};
use crate::observer::ObserverDesign;
use crate::sim::SystemModel;

pub use losses::{
    loss_lx_parallel, loss_lx_sequential, loss_ly, loss_lz, loss_pde_residual, mean_squared_residual,
};
pub use meta::{
    adapt_inner, meta_initial_eta, task_meta_gradient, train_meta, MetaConfig, MetaState, TaskGradient,
};
pub use optim::{adam_step, sgd_step, AdamHyper, AdamState};

/// Seed offset for the inverse map when no explicit `eta_seed` is set.
const ETA_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Parallel,
    Sequential,
    Pinn,
    Meta,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Parallel => "parallel",
            Method::Sequential => "sequential",
            Method::Pinn => "pinn",
            Method::Meta => "meta",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(Method::Parallel),
            "sequential" => Ok(Method::Sequential),
            "pinn" => Ok(Method::Pinn),
            "meta" => Ok(Method::Meta),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![50; 5]
}

/// Optimization settings shared by all methods. For meta-learning
/// `batch_size` is the per-task query size and `lr` the meta learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub adam: AdamHyper,
    pub seed: u64,
    pub method: Method,
    #[serde(default = "default_pinn_weight")]
    pub pinn_weight: f64,
    /// Seed for the inverse map; derived from `seed` when absent.
    #[serde(default)]
    pub eta_seed: Option<u64>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_pinn_weight() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            adam: AdamHyper::default(),
            seed: 0,
            method: Method::Parallel,
            pinn_weight: 1.0,
            eta_seed: None,
            hidden: default_hidden(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.pinn_weight >= 0.0 && self.pinn_weight.is_finite()) {
            return Err(Error::Config(format!("pinn_weight must be >= 0, got {}", self.pinn_weight)));
        }
        let h = &self.adam;
        if !(0.0..1.0).contains(&h.beta1) || !(0.0..1.0).contains(&h.beta2) || !(h.eps > 0.0) {
            return Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn theta_seed(&self) -> u64 {
        self.seed
    }

    pub fn eta_seed(&self) -> u64 {
        self.eta_seed.unwrap_or(self.seed.wrapping_add(ETA_SEED_OFFSET))
    }

    pub fn forward_spec(&self, dx: usize, dz: usize) -> MlpSpec {
        MlpSpec::new(dx, dz).with_hidden(self.hidden.clone())
    }

    pub fn inverse_spec(&self, dx: usize, dz: usize) -> MlpSpec {
        MlpSpec::new(dz, dx).with_hidden(self.hidden.clone())
    }
}

/// One row of the loss history; absent losses are written as empty fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub loss_lz: Option<f64>,
    pub loss_lx: Option<f64>,
    pub loss_ly: Option<f64>,
    pub alpha: Option<f64>,
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = String::from("iteration,loss_lz,loss_lx,loss_ly,alpha\n");
    let cell = |v: Option<f64>| v.map(crate::data::io::fmt_f64).unwrap_or_default();
    for r in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            cell(r.loss_lz),
            cell(r.loss_lx),
            cell(r.loss_ly),
            cell(r.alpha)
        )
        .expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// Forward map, inverse map and the per-epoch loss history.
#[derive(Debug, Clone)]
pub struct TrainedMaps {
    pub theta: MapParams,
    pub eta: MapParams,
    pub history: Vec<LossRecord>,
}

pub(crate) fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "{what} became {value} at epoch {epoch}, step {step}"
        )))
    }
}

fn minibatches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Minimizes `mean ||target - net(input)||^2` with Adam; returns the trained
/// network and the mean loss of every epoch.
fn fit_map(
    net: MapParams,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    cfg: &TrainConfig,
    seed: u64,
    label: &str,
) -> Result<(MapParams, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = net.tensors();
    let mut state = AdamState::new(&tensors);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = minibatches(inputs.nrows(), cfg.batch_size, &mut rng);
        for (step, idx) in batches.iter().enumerate() {
            let g = Graph::new();
            let params: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
            let bound = crate::nn::BoundParams { tensors: params.clone() };
            let x = g.constant(inputs.select(Axis(0), idx));
            let y = g.constant(targets.select(Axis(0), idx));
            let loss = mean_squared_residual(y, forward(&net, &bound, x)?)?;
            check_finite(loss.item(), label, epoch, step)?;
            total += loss.item() * idx.len() as f64;
            let grads: Vec<_> = g.grad(loss, &params, false)?.iter().map(|v| v.value()).collect();
            adam_step(&mut tensors, &grads, &mut state, cfg.lr, &cfg.adam);
        }
        epoch_losses.push(total / inputs.nrows() as f64);
    }
    Ok((net.with_tensors(tensors)?, epoch_losses))
}

fn dims(data: &MixedDataset) -> (usize, usize) {
    (data.tasks[0].x.ncols(), data.tasks[0].z.ncols())
}

/// Fresh inverse network with standardization fitted on `(z, x)`.
pub fn initial_inverse(z: &Array2<f64>, x: &Array2<f64>, cfg: &TrainConfig) -> Result<MapParams> {
    let net = init_params(&cfg.inverse_spec(x.ncols(), z.ncols()), cfg.eta_seed())?;
    fit_normalization(&net, z, x)
}

/// Inverse map alone, trained on observer labels (the η half of parallel
/// mixed-task learning).
pub fn train_inverse_parallel(data: &MixedDataset, cfg: &TrainConfig) -> Result<(MapParams, Vec<f64>)> {
    cfg.validate()?;
    let (x, z) = (data.x(), data.z());
    let eta = initial_inverse(&z, &x, cfg)?;
    fit_map(eta, &z, &x, cfg, cfg.eta_seed(), "L_x")
}

/// Two independent Adam loops: `L_z` over θ and `L_x` (on observer labels)
/// over η, each on its own shuffled mini-batches of the mixed task rows.
pub fn train_parallel_mixed(data: &MixedDataset, cfg: &TrainConfig) -> Result<TrainedMaps> {
    cfg.validate()?;
    let (dx, dz) = dims(data);
    let (x, z) = (data.x(), data.z());
    let theta = fit_normalization(&init_params(&cfg.forward_spec(dx, dz), cfg.theta_seed())?, &x, &z)?;
    let (theta, lz) = fit_map(theta, &x, &z, cfg, cfg.theta_seed(), "L_z")?;
    let (eta, lx) = train_inverse_parallel(data, cfg)?;
    let history = lz
        .iter()
        .zip(&lx)
        .enumerate()
        .map(|(i, (lz, lx))| LossRecord {
            iteration: i,
            loss_lz: Some(*lz),
            loss_lx: Some(*lx),
            loss_ly: None,
            alpha: None,
        })
        .collect();
    Ok(TrainedMaps { theta, eta, history })
}

/// Joint loop over the composition `F^-1_eta(F_theta(x))`: θ descends
/// `L_x + L_z` (plus the weighted PDE residual for [`Method::Pinn`]), η
/// descends `L_x`. One Adam step on each per mini-batch.
pub fn train_sequential_mixed(
    data: &MixedDataset,
    cfg: &TrainConfig,
    model: &dyn SystemModel,
    design: &ObserverDesign,
) -> Result<TrainedMaps> {
    cfg.validate()?;
    let (dx, dz) = dims(data);
    let (x, z) = (data.x(), data.z());
    let theta_net = fit_normalization(&init_params(&cfg.forward_spec(dx, dz), cfg.theta_seed())?, &x, &z)?;
    let eta_net = initial_inverse(&z, &x, cfg)?;
    train_sequential_from(theta_net, eta_net, &x, &z, cfg, model, design, false)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_sequential_from(
    theta_net: MapParams,
    eta_net: MapParams,
    x: &Array2<f64>,
    z: &Array2<f64>,
    cfg: &TrainConfig,
    model: &dyn SystemModel,
    design: &ObserverDesign,
    freeze_theta: bool,
) -> Result<TrainedMaps> {
    let pinn = cfg.method == Method::Pinn && cfg.pinn_weight > 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = theta_net.tensors();
    let mut eta = eta_net.tensors();
    let mut theta_state = AdamState::new(&theta);
    let mut eta_state = AdamState::new(&eta);
    let n_theta = theta.len();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let (mut sum_lz, mut sum_lx) = (0.0, 0.0);
        for (step, idx) in minibatches(x.nrows(), cfg.batch_size, &mut rng).iter().enumerate() {
            let g = Graph::new();
            let tb = crate::nn::BoundParams {
                tensors: theta
                    .iter()
                    .map(|t| if freeze_theta { g.constant(t.clone()) } else { g.param(t.clone()) })
                    .collect(),
            };
            let eb = crate::nn::BoundParams {
                tensors: eta.iter().map(|t| g.param(t.clone())).collect(),
            };
            let xb = x.select(Axis(0), idx);
            let xv = g.constant(xb.clone());
            let lz = loss_lz(&theta_net, &tb, xv, g.constant(z.select(Axis(0), idx)))?;
            let lx = loss_lx_sequential(&theta_net, &tb, &eta_net, &eb, xv)?;
            check_finite(lz.item(), "L_z", epoch, step)?;
            check_finite(lx.item(), "L_x", epoch, step)?;
            sum_lz += lz.item() * idx.len() as f64;
            sum_lx += lx.item() * idx.len() as f64;

            // η only sees L_x; θ additionally sees L_z and the PDE residual.
            let mut total = lx.add(lz)?;
            if pinn {
                let pde = loss_pde_residual(&theta_net, &tb, &xb, model, design)?;
                check_finite(pde.item(), "PDE residual", epoch, step)?;
                total = total.add(pde.scale(cfg.pinn_weight))?;
            }
            if freeze_theta {
                let grads: Vec<_> = g.grad(lx, &eb.tensors, false)?.iter().map(|v| v.value()).collect();
                adam_step(&mut eta, &grads, &mut eta_state, cfg.lr, &cfg.adam);
            } else {
                let wrt: Vec<Var> = tb.tensors.iter().chain(&eb.tensors).copied().collect();
                let grads: Vec<_> = g.grad(total, &wrt, false)?.iter().map(|v| v.value()).collect();
                adam_step(&mut theta, &grads[..n_theta], &mut theta_state, cfg.lr, &cfg.adam);
                adam_step(&mut eta, &grads[n_theta..], &mut eta_state, cfg.lr, &cfg.adam);
            }
        }
        let n = x.nrows() as f64;
        history.push(LossRecord {
            iteration: epoch,
            loss_lz: Some(sum_lz / n),
            loss_lx: Some(sum_lx / n),
            loss_ly: None,
            alpha: None,
        });
    }
    Ok(TrainedMaps {
        theta: theta_net.with_tensors(theta)?,
        eta: eta_net.with_tensors(eta)?,
        history,
    })
}
