use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    adam_step, check_finite, initial_inverse, loss_lx_parallel, loss_ly, sgd_step, train_inverse_parallel,
    AdamState, LossRecord, TrainConfig,
};
use crate::autodiff::{Graph, Var};
use crate::data::{split_adapt_query, MixedDataset, TaskDataset};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, MapParams};
use crate::sim::SystemModel;

const META_SEED_SALT: u64 = 0x6d65_7461;
const ALPHA_COLLAPSE: f64 = 1e-10;

fn default_n_batch_meta() -> usize {
    4
}
fn default_n_adapt() -> usize {
    5
}
fn default_n_adapt_points() -> usize {
    32
}
fn default_alpha_init() -> f64 {
    1e-2
}
fn default_iterations() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "default_n_batch_meta")]
    pub n_batch_meta: usize,
    #[serde(default = "default_n_adapt")]
    pub n_adapt: usize,
    /// Samples per inner step.
    #[serde(default = "default_n_adapt_points")]
    pub n_adapt_points: usize,
    #[serde(default = "default_alpha_init")]
    pub alpha_init: f64,
    /// Outer iterations (meta-updates).
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub first_order: bool,
    #[serde(default)]
    pub pretrain: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            n_batch_meta: default_n_batch_meta(),
            n_adapt: default_n_adapt(),
            n_adapt_points: default_n_adapt_points(),
            alpha_init: default_alpha_init(),
            iterations: default_iterations(),
            first_order: false,
            pretrain: false,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batch_meta == 0 {
            return Err(Error::Config("n_batch_meta must be at least 1".into()));
        }
        if self.n_adapt > 0 && self.n_adapt_points == 0 {
            return Err(Error::Config("n_adapt_points must be at least 1".into()));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init.is_finite()) {
            return Err(Error::Config(format!("alpha_init must be positive, got {}", self.alpha_init)));
        }
        Ok(())
    }
}

/// Meta-learned inverse map and adaptation rate.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub eta: MapParams,
    pub alpha: f64,
    pub history: Vec<LossRecord>,
}

/// Meta-gradient contribution of one task.
#[derive(Debug, Clone)]
pub struct TaskGradient {
    pub eta: Vec<Array2<f64>>,
    pub log_alpha: f64,
    /// Query loss after adaptation.
    pub query_loss: f64,
    /// Adaptation loss before the first inner step.
    pub adapt_loss: Option<f64>,
}

/// Runs `n_adapt` inner SGD steps with rate `exp(log_alpha)` on `inner` and
/// differentiates `outer` at the adapted parameters with respect to the
/// initial parameters and `log_alpha`. Inner gradients are recorded on the
/// graph unless `first_order`.
pub fn task_meta_gradient<I, O>(
    eta: &[Array2<f64>],
    log_alpha: f64,
    n_adapt: usize,
    first_order: bool,
    inner: I,
    outer: O,
) -> Result<TaskGradient>
where
    I: for<'g> Fn(&'g Graph, usize, &[Var<'g>]) -> Result<Var<'g>>,
    O: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let leaves: Vec<Var> = eta.iter().map(|t| g.param(t.clone())).collect();
    let log_alpha_var = g.param(Array2::from_elem((1, 1), log_alpha));
    let alpha = log_alpha_var.exp();
    let mut current = leaves.clone();
    let mut adapt_loss = None;
    for j in 0..n_adapt {
        let ly = inner(&g, j, &current)?;
        adapt_loss.get_or_insert(ly.item());
        let grads = g.grad(ly, &current, !first_order)?;
        current = current
            .iter()
            .zip(grads)
            .map(|(p, gr)| p.sub(gr.scale_by(alpha)?))
            .collect::<Result<_>>()?;
    }
    let lx = outer(&g, &current)?;
    let mut wrt = leaves;
    wrt.push(log_alpha_var);
    let mut grads: Vec<Array2<f64>> = g.grad(lx, &wrt, false)?.iter().map(|v| v.value()).collect();
    let la = grads.pop().expect("log alpha gradient")[[0, 0]];
    Ok(TaskGradient {
        eta: grads,
        log_alpha: la,
        query_loss: lx.item(),
        adapt_loss,
    })
}

/// Plain inner-loop adaptation: one SGD step on `L_y` per `(z, y)` batch.
/// Returns the adapted network and `L_y` before each step.
pub fn adapt_inner(
    eta: &MapParams,
    alpha: f64,
    batches: &[(Array2<f64>, Array2<f64>)],
    model: &dyn SystemModel,
) -> Result<(MapParams, Vec<f64>)> {
    let mut tensors = eta.tensors();
    let mut losses = Vec::with_capacity(batches.len());
    for (z, y) in batches {
        let g = Graph::new();
        let bound = BoundParams {
            tensors: tensors.iter().map(|t| g.param(t.clone())).collect(),
        };
        let ly = loss_ly(eta, &bound, g.constant(z.clone()), g.constant(y.clone()), model)?;
        losses.push(ly.item());
        let grads: Vec<_> = g.grad(ly, &bound.tensors, false)?.iter().map(|v| v.value()).collect();
        tensors = sgd_step(&tensors, &grads, alpha);
    }
    Ok((eta.with_tensors(tensors)?, losses))
}

/// Starting point of meta-training: a parallel-trained inverse map when
/// `pretrain` is set, a fresh one otherwise. Standardization is fitted on the
/// pooled task data either way.
pub fn meta_initial_eta(pool: &[TaskDataset], cfg: &TrainConfig, mcfg: &MetaConfig) -> Result<MapParams> {
    let data = MixedDataset::new(pool.to_vec())?;
    if mcfg.pretrain {
        Ok(train_inverse_parallel(&data, cfg)?.0)
    } else {
        initial_inverse(&data.z(), &data.x(), cfg)
    }
}

struct TaskBatch {
    adapt: Vec<(Array2<f64>, Array2<f64>)>,
    query_z: Array2<f64>,
    query_x: Array2<f64>,
}

fn draw_task_batch(ds: &TaskDataset, mcfg: &MetaConfig, query_size: usize, seed: u64) -> Result<TaskBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_points = mcfg.n_adapt * mcfg.n_adapt_points;
    let (adapt_idx, query_idx) = split_adapt_query(ds.len(), n_points, &mut rng)?;
    let query_idx = &query_idx[..query_size.min(query_idx.len())];
    let adapt = adapt_idx
        .chunks(mcfg.n_adapt_points.max(1))
        .map(|c| (ds.z.select(Axis(0), c), ds.y.select(Axis(0), c)))
        .collect();
    Ok(TaskBatch {
        adapt,
        query_z: ds.z.select(Axis(0), query_idx),
        query_x: ds.x.select(Axis(0), query_idx),
    })
}

/// Meta-learning of the inverse map (first-order or full second-order MAML).
///
/// Every outer iteration draws `n_batch_meta` tasks from `pool` (without
/// replacement when the pool is large enough), splits each task's rows into
/// disjoint adaptation and query samples, adapts a task-local copy of η on
/// `L_y` and accumulates the gradient of the adapted query `L_x` with respect
/// to η and `log alpha`. Both take one Adam step per iteration.
pub fn train_meta(
    pool: &[TaskDataset],
    eta_init: MapParams,
    cfg: &TrainConfig,
    mcfg: &MetaConfig,
    model: &dyn SystemModel,
) -> Result<MetaState> {
    cfg.validate()?;
    mcfg.validate()?;
    if pool.is_empty() {
        return Err(Error::InsufficientData("meta-training needs at least one task".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ META_SEED_SALT);
    let mut eta = eta_init.tensors();
    let mut log_alpha = vec![Array2::from_elem((1, 1), mcfg.alpha_init.ln())];
    let mut eta_state = AdamState::new(&eta);
    let mut alpha_state = AdamState::new(&log_alpha);
    let mut history = Vec::with_capacity(mcfg.iterations);
    let mut warned = false;

    for iter in 0..mcfg.iterations {
        let picks: Vec<usize> = if mcfg.n_batch_meta <= pool.len() {
            rand::seq::index::sample(&mut rng, pool.len(), mcfg.n_batch_meta).into_vec()
        } else {
            (0..mcfg.n_batch_meta).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let seeds: Vec<u64> = picks.iter().map(|_| rng.random()).collect();
        let la = log_alpha[0][[0, 0]];

        let results: Vec<TaskGradient> = picks
            .par_iter()
            .zip(&seeds)
            .map(|(&p, &seed)| {
                let b = draw_task_batch(&pool[p], mcfg, cfg.batch_size, seed)?;
                task_meta_gradient(
                    &eta,
                    la,
                    mcfg.n_adapt,
                    mcfg.first_order,
                    |g, j, params| {
                        let bound = BoundParams { tensors: params.to_vec() };
                        let (z, y) = &b.adapt[j];
                        loss_ly(&eta_init, &bound, g.constant(z.clone()), g.constant(y.clone()), model)
                    },
                    |g, params| {
                        let bound = BoundParams { tensors: params.to_vec() };
                        loss_lx_parallel(&eta_init, &bound, g.constant(b.query_z.clone()), g.constant(b.query_x.clone()))
                    },
                )
            })
            .collect::<Result<_>>()?;

        // Ordered reduction over the meta-batch.
        let mut grad_eta: Vec<Array2<f64>> = eta.iter().map(|t| Array2::zeros(t.dim())).collect();
        let mut grad_la = 0.0;
        let (mut lx, mut ly) = (0.0, 0.0);
        for r in &results {
            for (acc, g) in grad_eta.iter_mut().zip(&r.eta) {
                *acc += g;
            }
            grad_la += r.log_alpha;
            lx += r.query_loss;
            ly += r.adapt_loss.unwrap_or(f64::NAN);
        }
        check_finite(lx, "query L_x", iter, 0)?;
        let n = results.len() as f64;
        adam_step(&mut eta, &grad_eta, &mut eta_state, cfg.lr, &cfg.adam);
        adam_step(&mut log_alpha, &[Array2::from_elem((1, 1), grad_la)], &mut alpha_state, cfg.lr, &cfg.adam);
        let alpha = log_alpha[0][[0, 0]].exp();
        if alpha < ALPHA_COLLAPSE && !warned {
            log::warn!("adaptation rate collapsed to {alpha:e} at iteration {iter}");
            warned = true;
        }
        history.push(LossRecord {
            iteration: iter,
            loss_lz: None,
            loss_lx: Some(lx / n),
            loss_ly: (mcfg.n_adapt > 0).then_some(ly / n),
            alpha: Some(alpha),
        });
    }
    Ok(MetaState {
        eta: eta_init.with_tensors(eta)?,
        alpha: log_alpha[0][[0, 0]].exp(),
        history,
    })
}
