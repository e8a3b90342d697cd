use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::report::{tag, AdaptCheck, ExperimentReport, ResultRow, TaggedSeries, NO_STRATEGY};
use super::{time_mean_error, ErrorSeries};
use crate::adapt::{online_adapt, t_init_min, StrategyKind};
use crate::config::RunConfig;
use crate::data::io::fmt_f64;
use crate::data::{
    generate_datasets, generate_task_dataset, make_training_tasks, make_validation_tasks, split_adapt_query,
    DatasetNoise, MixedDataset, Task, TaskDataset, ValidationKind,
};
use crate::error::{Error, Result};
use crate::nn::MapParams;
use crate::observer::run_observer;
use crate::sim::{NoiseSpec, SystemModel};
use crate::train::{
    adapt_inner, meta_initial_eta, train_meta, train_parallel_mixed, train_sequential_mixed, Method, TrainConfig,
};

/// First id of validation tasks, keeping them apart from training ids.
const VALIDATION_ID_BASE: usize = 1000;

/// A trained observer: forward map for the filter initialization, inverse
/// map, and for meta-learning the adaptation rate and step count.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub method: Method,
    pub theta: MapParams,
    pub eta: MapParams,
    pub alpha: Option<f64>,
    pub n_adapt: usize,
}

/// How one validation task is simulated and scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub strategy: StrategyKind,
    pub noise: Option<NoiseSpec>,
    pub n_steps: usize,
}

impl EvalOptions {
    /// Configured horizon, extended when the configured strategy reads
    /// samples beyond it.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            strategy: cfg.adaptation.strategy,
            noise: None,
            n_steps: cfg.dataset.eval_steps().max(strategy_steps(cfg, cfg.adaptation.strategy)?),
        })
    }
}

/// Steps a trajectory needs for `kind` with the configured meta step count.
fn strategy_steps(cfg: &RunConfig, kind: StrategyKind) -> Result<usize> {
    let s = cfg.strategy(kind)?;
    let dt = cfg.dataset.dt;
    let span = if kind.is_window() {
        s.window_length
    } else {
        t_init_min(cfg.adaptation.n_batch, cfg.meta.n_adapt, dt)
    };
    Ok(((s.delay + span) / dt).ceil() as usize + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub ly_before: f64,
    pub ly_after: f64,
    pub t_init: f64,
    pub eta: MapParams,
}

#[derive(Debug, Clone)]
pub struct TaskEval {
    pub task: Task,
    pub series: ErrorSeries,
    pub e_bar_t: f64,
    pub adapt: Option<AdaptOutcome>,
}

fn mix(seed: u64, id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(id as u64).rotate_left(29)
}

fn output_loss(model: &dyn SystemModel, x_hat: &Array2<f64>, y: &Array2<f64>, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no query samples left after adaptation".into()));
    }
    let y_hat = model.output_rows(&x_hat.select(Axis(0), rows))?;
    let y = y.select(Axis(0), rows);
    Ok((&y - &y_hat).mapv(|v| v * v).sum() / rows.len() as f64)
}

/// Simulates `task`, runs the observer from `F_theta(x0)` on the (possibly
/// noisy) output, adapts the inverse map online when the estimator carries an
/// adaptation rate, and scores the state estimate after the transient.
pub fn evaluate_task(est: &Estimator, task: &Task, cfg: &RunConfig, opts: &EvalOptions, seed: u64) -> Result<TaskEval> {
    let design = cfg.design()?;
    let model = task.model();
    let dt = cfg.dataset.dt;
    let noise = opts.noise.filter(|n| !n.is_zero()).map(|spec| DatasetNoise {
        spec: NoiseSpec { seed: mix(spec.seed, task.task_id), ..spec },
        perturb_labels: false,
    });
    let ds = generate_task_dataset(task, &model, &design, &cfg.observer.sampling, dt, opts.n_steps, noise.as_ref())?;
    let x0 = Array2::from_shape_vec((1, task.x0.len()), task.x0.clone())
        .map_err(|e| Error::shape("evaluate_task", e.to_string()))?;
    let z0 = est.theta.predict(&x0)?.row(0).to_vec();
    let z_hat = run_observer(&design, &z0, &ds.y, 0.0, dt)?;
    let x_unadapted = est.eta.predict(&z_hat.states)?;
    let start = ErrorSeries {
        task_id: task.task_id,
        times: ds.times.clone(),
        e_x: vec![],
        e_z: vec![],
        floored: vec![],
    }
    .index_from(cfg.transient_start()?);

    let (x_hat, adapt) = match est.alpha {
        Some(alpha) if est.n_adapt > 0 => {
            let strategy = cfg.strategy(opts.strategy)?;
            let run = online_adapt(
                &est.eta,
                alpha,
                &z_hat,
                &ds.y,
                &strategy,
                cfg.adaptation.n_batch,
                est.n_adapt,
                mix(seed, task.task_id),
                &model,
            )?;
            let x_hat = run.eta_adapted.predict(&z_hat.states)?;
            let query: Vec<usize> = (start..ds.len()).filter(|k| !run.samples_used.contains(k)).collect();
            let outcome = AdaptOutcome {
                ly_before: output_loss(&model, &x_unadapted, &ds.y, &query)?,
                ly_after: output_loss(&model, &x_hat, &ds.y, &query)?,
                t_init: run.t_init_actual,
                eta: run.eta_adapted,
            };
            (x_hat, Some(outcome))
        }
        _ => (x_unadapted, None),
    };
    let series = ErrorSeries::new(task.task_id, ds.times, &ds.x, &x_hat, &ds.z, &z_hat.states)?;
    if start >= series.e_x.len() {
        return Err(Error::InsufficientData(format!(
            "evaluation horizon ends before the transient window ({} s)",
            cfg.transient_start()?
        )));
    }
    let e_bar_t = time_mean_error(&series.e_x[start..], cfg.evaluation.literal_time_mean)?;
    if !e_bar_t.is_finite() {
        return Err(Error::Numerical(format!("non-finite error on task {}", task.task_id)));
    }
    Ok(TaskEval { task: task.clone(), series, e_bar_t, adapt })
}

/// Training datasets of the configured task distribution.
pub fn training_pool(cfg: &RunConfig) -> Result<Vec<TaskDataset>> {
    let tasks = make_training_tasks(&cfg.tasks, cfg.dataset.n_train_tasks, cfg.dataset.seed)?;
    generate_datasets(
        &tasks,
        &cfg.design()?,
        &cfg.observer.sampling,
        cfg.dataset.dt,
        cfg.dataset.train_steps(),
    )
}

pub fn validation_tasks(cfg: &RunConfig, kind: ValidationKind) -> Result<Vec<Task>> {
    let n = match kind {
        ValidationKind::InRange => cfg.evaluation.n_val,
        ValidationKind::OutOfRange => cfg.evaluation.n_val_out,
    };
    let base = match kind {
        ValidationKind::InRange => VALIDATION_ID_BASE,
        ValidationKind::OutOfRange => 2 * VALIDATION_ID_BASE,
    };
    make_validation_tasks(&cfg.tasks, kind, n, cfg.dataset.seed, base)
}

/// Trains every configured method with training seed `seed`. Meta-learning
/// reuses the parallel forward map and, when pretraining, the parallel
/// inverse map as its starting point.
pub fn train_estimators(cfg: &RunConfig, pool: &[TaskDataset], seed: u64) -> Result<Vec<Estimator>> {
    let methods = &cfg.evaluation.methods;
    let design = cfg.design()?;
    let data = MixedDataset::new(pool.to_vec())?;
    let tcfg = |method| TrainConfig { seed, method, ..cfg.training.clone() };
    let h = pool[0].task.model();
    let needs_parallel = methods.iter().any(|m| matches!(m, Method::Parallel | Method::Meta));
    let parallel = if needs_parallel {
        Some(train_parallel_mixed(&data, &tcfg(Method::Parallel))?)
    } else {
        None
    };
    let mut out = Vec::new();
    for &method in methods {
        let est = match method {
            Method::Parallel => {
                let p = parallel.as_ref().expect("trained above");
                Estimator { method, theta: p.theta.clone(), eta: p.eta.clone(), alpha: None, n_adapt: 0 }
            }
            Method::Sequential | Method::Pinn => {
                let s = train_sequential_mixed(&data, &tcfg(method), &h, &design)?;
                Estimator { method, theta: s.theta, eta: s.eta, alpha: None, n_adapt: 0 }
            }
            Method::Meta => {
                let p = parallel.as_ref().expect("trained above");
                let mcfg = &cfg.meta;
                // The parallel run trains η with the same seed and settings.
                let eta0 = if mcfg.pretrain {
                    p.eta.clone()
                } else {
                    meta_initial_eta(pool, &tcfg(method), mcfg)?
                };
                let state = train_meta(pool, eta0, &tcfg(method), mcfg, &h)?;
                Estimator {
                    method,
                    theta: p.theta.clone(),
                    eta: state.eta,
                    alpha: Some(state.alpha),
                    n_adapt: mcfg.n_adapt,
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// Evaluates each estimator on `tasks`; adapting estimators run once per
/// strategy in `strategies`.
fn evaluate_pass(
    name: &str,
    estimators: &[Estimator],
    tasks: &[Task],
    cfg: &RunConfig,
    opts: &EvalOptions,
    strategies: &[StrategyKind],
    seed: u64,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new(name, &cfg.hash());
    report.seeds.push(seed);
    for est in estimators {
        let kinds: Vec<Option<StrategyKind>> = if est.alpha.is_some() && est.n_adapt > 0 {
            strategies.iter().copied().map(Some).collect()
        } else {
            vec![None]
        };
        for kind in kinds {
            let o = EvalOptions { strategy: kind.unwrap_or(opts.strategy), ..*opts };
            let results: Vec<TaskEval> = tasks
                .par_iter()
                .map(|t| evaluate_task(est, t, cfg, &o, seed))
                .collect::<Result<_>>()?;
            let strategy = kind.map(|k| k.name()).unwrap_or(NO_STRATEGY);
            for r in results {
                report.rows.push(ResultRow {
                    method: est.method.name().to_string(),
                    task_id: r.task.task_id,
                    lambda: r.task.lambda,
                    x0: r.task.x0.clone(),
                    strategy: strategy.to_string(),
                    seed,
                    e_bar_t: r.e_bar_t,
                });
                if let Some(a) = r.adapt {
                    report.adapt_checks.push(AdaptCheck {
                        seed,
                        task_id: r.task.task_id,
                        ly_before: a.ly_before,
                        ly_after: a.ly_after,
                    });
                }
                report.series.push(TaggedSeries {
                    tag: tag(est.method.name(), strategy),
                    seed,
                    series: r.series,
                });
            }
        }
    }
    Ok(report)
}

/// Inner-loop adaptation on held-out tasks as in meta-training: each task's
/// backward-sampled dataset is split into adaptation and query rows, η is
/// adapted on the former and the output loss is compared on the latter.
pub fn held_out_adaptation(est: &Estimator, tasks: &[Task], cfg: &RunConfig, seed: u64) -> Result<Vec<AdaptCheck>> {
    let alpha = est
        .alpha
        .ok_or_else(|| Error::Config("held-out adaptation needs a meta-learned estimator".into()))?;
    let design = cfg.design()?;
    let per_batch = cfg.meta.n_adapt_points.max(1);
    tasks
        .par_iter()
        .map(|task| {
            let model = task.model();
            let ds = generate_task_dataset(
                task,
                &model,
                &design,
                &cfg.observer.sampling,
                cfg.dataset.dt,
                cfg.dataset.eval_steps(),
                None,
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, task.task_id));
            let (adapt_idx, query) = split_adapt_query(ds.len(), est.n_adapt * per_batch, &mut rng)?;
            let batches: Vec<_> = adapt_idx
                .chunks(per_batch)
                .map(|c| (ds.z.select(Axis(0), c), ds.y.select(Axis(0), c)))
                .collect();
            let (adapted, _) = adapt_inner(&est.eta, alpha, &batches, &model)?;
            Ok(AdaptCheck {
                seed,
                task_id: task.task_id,
                ly_before: output_loss(&model, &est.eta.predict(&ds.z)?, &ds.y, &query)?,
                ly_after: output_loss(&model, &adapted.predict(&ds.z)?, &ds.y, &query)?,
            })
        })
        .collect()
}

fn require_kind(cfg: &RunConfig, lambda: bool) -> Result<()> {
    if cfg.is_lambda_experiment() != lambda {
        let want = if lambda { "lambda-variation" } else { "x0-variation" };
        return Err(Error::Config(format!("this experiment needs tasks.kind = {want}")));
    }
    Ok(())
}

/// Lambda experiment for already trained estimators of one seed.
pub fn evaluate_lambda(estimators: &[Estimator], cfg: &RunConfig, seed: u64) -> Result<ExperimentReport> {
    require_kind(cfg, true)?;
    let tasks = validation_tasks(cfg, ValidationKind::InRange)?;
    let opts = EvalOptions::from_config(cfg)?;
    evaluate_pass("lambda", estimators, &tasks, cfg, &opts, &[cfg.adaptation.strategy], seed)
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.evaluation.seeds.is_empty() {
        vec![cfg.training.seed]
    } else {
        cfg.evaluation.seeds.clone()
    }
}

/// Trains all methods on the evenly spaced training lambdas and scores them
/// on the validation lambdas, once per seed.
pub fn run_experiment_lambda(cfg: &RunConfig) -> Result<ExperimentReport> {
    require_kind(cfg, true)?;
    let pool = training_pool(cfg)?;
    let mut report = ExperimentReport::new("lambda", &cfg.hash());
    for seed in seeds(cfg) {
        let est = train_estimators(cfg, &pool, seed)?;
        report.merge(evaluate_lambda(&est, cfg, seed)?);
    }
    Ok(report)
}

/// The three passes of the initial-state experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct X0Report {
    pub in_range: ExperimentReport,
    pub out_of_range: ExperimentReport,
    pub noisy: ExperimentReport,
}

impl X0Report {
    pub fn merge(&mut self, other: X0Report) {
        self.in_range.merge(other.in_range);
        self.out_of_range.merge(other.out_of_range);
        self.noisy.merge(other.noisy);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.in_range.write(dir, "in_")?;
        self.out_of_range.write(dir, "out_")?;
        self.noisy.write(dir, "noisy_")
    }
}

pub fn evaluate_x0(estimators: &[Estimator], cfg: &RunConfig, seed: u64) -> Result<X0Report> {
    require_kind(cfg, false)?;
    let opts = EvalOptions::from_config(cfg)?;
    let strategies = [cfg.adaptation.strategy];
    let inside = validation_tasks(cfg, ValidationKind::InRange)?;
    let outside = validation_tasks(cfg, ValidationKind::OutOfRange)?;
    let noisy_opts = EvalOptions { noise: Some(cfg.evaluation.noise), ..opts };
    Ok(X0Report {
        in_range: evaluate_pass("x0-in", estimators, &inside, cfg, &opts, &strategies, seed)?,
        out_of_range: evaluate_pass("x0-out", estimators, &outside, cfg, &opts, &strategies, seed)?,
        noisy: evaluate_pass("x0-noisy", estimators, &inside, cfg, &noisy_opts, &strategies, seed)?,
    })
}

/// Initial-state experiment: in-range, out-of-range and noisy passes.
pub fn run_experiment_x0(cfg: &RunConfig) -> Result<X0Report> {
    require_kind(cfg, false)?;
    let pool = training_pool(cfg)?;
    let mut out: Option<X0Report> = None;
    for seed in seeds(cfg) {
        let est = train_estimators(cfg, &pool, seed)?;
        let r = evaluate_x0(&est, cfg, seed)?;
        match out.as_mut() {
            Some(acc) => acc.merge(r),
            None => out = Some(r),
        }
    }
    out.ok_or_else(|| Error::Config("no seeds to run".into()))
}

/// Scores a meta-learned estimator with all four sampling strategies on the
/// in-range validation set. The horizon is extended when a delayed window
/// would not fit.
pub fn evaluate_sampling(meta: &Estimator, cfg: &RunConfig, seed: u64) -> Result<ExperimentReport> {
    if meta.alpha.is_none() {
        return Err(Error::Config("the sampling experiment needs a meta-learned estimator".into()));
    }
    let tasks = validation_tasks(cfg, ValidationKind::InRange)?;
    let mut opts = EvalOptions::from_config(cfg)?;
    for kind in StrategyKind::ALL {
        opts.n_steps = opts.n_steps.max(strategy_steps(cfg, kind)?);
    }
    evaluate_pass("sampling", std::slice::from_ref(meta), &tasks, cfg, &opts, &StrategyKind::ALL, seed)
}

/// Trains the parallel and meta methods per seed and compares the four
/// sampling strategies on identical tasks.
pub fn run_experiment_sampling(cfg: &RunConfig) -> Result<ExperimentReport> {
    let pool = training_pool(cfg)?;
    let mut only_meta = cfg.clone();
    only_meta.evaluation.methods = vec![Method::Meta];
    let mut report = ExperimentReport::new("sampling", &cfg.hash());
    for seed in seeds(cfg) {
        let est = train_estimators(&only_meta, &pool, seed)?;
        report.merge(evaluate_sampling(&est[0], cfg, seed)?);
    }
    Ok(report)
}

/// Time-averaged error over a grid of initial states at cell centres of
/// `[-1, 1]^2`; `values[[i, j]]` belongs to `(x1[i], x2[j])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorGrid {
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub values: Array2<f64>,
    pub method: String,
}

impl ErrorGrid {
    /// `grid.csv` (one line per `x1`, row-major) and `grid.json` with the axes.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut csv = String::new();
        for row in self.values.rows() {
            let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
            csv.push_str(&cells.join(","));
            csv.push('\n');
        }
        fs::write(dir.join("grid.csv"), csv)?;
        let meta = json!({
            "method": self.method,
            "rows": "x1",
            "cols": "x2",
            "x1": self.x1,
            "x2": self.x2,
        });
        fs::write(dir.join("grid.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }
}

pub fn error_profile_grid(est: &Estimator, resolution: usize, cfg: &RunConfig, seed: u64) -> Result<ErrorGrid> {
    if resolution == 0 {
        return Err(Error::Config("grid resolution must be at least 1".into()));
    }
    let axis: Vec<f64> = (0..resolution)
        .map(|i| -1.0 + (2 * i + 1) as f64 / resolution as f64)
        .collect();
    let tasks: Vec<Task> = axis
        .iter()
        .flat_map(|a| axis.iter().map(move |b| vec![*a, *b]))
        .enumerate()
        .map(|(i, x0)| Task { task_id: i, lambda: cfg.tasks.fixed_lambda, x0 })
        .collect();
    let opts = EvalOptions::from_config(cfg)?;
    let values: Vec<f64> = tasks
        .par_iter()
        .map(|t| evaluate_task(est, t, cfg, &opts, seed).map(|r| r.e_bar_t))
        .collect::<Result<_>>()?;
    Ok(ErrorGrid {
        x1: axis.clone(),
        x2: axis,
        values: Array2::from_shape_vec((resolution, resolution), values)
            .map_err(|e| Error::shape("error_profile_grid", e.to_string()))?,
        method: est.method.name().to_string(),
    })
}
