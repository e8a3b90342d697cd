//! Task distributions, Latin hypercube sampling, per-task dataset generation
//! through backward sampling, and adaptation/query splits.

pub(crate) mod io;
mod lhs;

pub use io::{read_dataset_dir, read_task_csv, write_dataset_dir, write_task_csv, DatasetManifest, MANIFEST_VERSION};
pub use lhs::latin_hypercube;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observer::{backward_sample_init, run_observer, BackwardSamplingConfig, ObserverDesign};
use crate::sim::{self, apply_noise, Duffing, NoiseSpec, SimGrid, SystemModel, Trajectory};

/// One system instance: a Duffing parameter and an initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: usize,
    pub lambda: f64,
    pub x0: Vec<f64>,
}

impl Task {
    pub fn model(&self) -> Duffing {
        Duffing::new(self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariationKind {
    LambdaVariation,
    X0Variation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDistribution {
    pub kind: VariationKind,
    /// Range of lambda for the lambda-variation kind.
    pub lambda_range: (f64, f64),
    /// Per-dimension box of initial states for the x0-variation kind.
    pub x0_box: Vec<(f64, f64)>,
    /// Box enclosing the out-of-range validation states (minus `x0_box`).
    pub x0_outer_box: Vec<(f64, f64)>,
    pub fixed_lambda: f64,
    pub fixed_x0: Vec<f64>,
}

impl TaskDistribution {
    /// Lambda in `[1, 5]` with `x0 = [0.5, 0.5]`.
    pub fn lambda_default() -> Self {
        Self {
            kind: VariationKind::LambdaVariation,
            lambda_range: (1.0, 5.0),
            x0_box: vec![(-1.0, 1.0); 2],
            x0_outer_box: vec![(-2.0, 2.0); 2],
            fixed_lambda: 1.0,
            fixed_x0: vec![0.5, 0.5],
        }
    }

    /// `x0` in `[-1, 1]^2` with `lambda = 1`.
    pub fn x0_default() -> Self {
        Self {
            kind: VariationKind::X0Variation,
            ..Self::lambda_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            VariationKind::LambdaVariation => {
                let (lo, hi) = self.lambda_range;
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::Config(format!(
                        "lambda_range must be a nonempty interval, got [{lo}, {hi}]"
                    )));
                }
                if !(lo > 0.0) {
                    return Err(Error::Config(format!("lambda_range must be positive, got [{lo}, {hi}]")));
                }
                if self.fixed_x0.len() != 2 {
                    return Err(Error::Config("fixed_x0 must have 2 entries".into()));
                }
            }
            VariationKind::X0Variation => {
                if self.x0_box.len() != 2 || self.x0_box.iter().any(|(lo, hi)| !(lo < hi)) {
                    return Err(Error::Config(format!(
                        "x0_box must hold 2 nonempty intervals, got {:?}",
                        self.x0_box
                    )));
                }
                let nested = self
                    .x0_outer_box
                    .iter()
                    .zip(&self.x0_box)
                    .all(|(o, i)| o.0 < i.0 && o.1 > i.1);
                if self.x0_outer_box.len() != 2 || !nested {
                    return Err(Error::Config(format!(
                        "x0_outer_box {:?} must strictly contain x0_box",
                        self.x0_outer_box
                    )));
                }
                if !(self.fixed_lambda > 0.0) {
                    return Err(Error::Config("fixed_lambda must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

/// Validation sets relative to the training range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationKind {
    InRange,
    OutOfRange,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Training tasks: evenly spaced lambdas, or Latin hypercube initial states.
pub fn make_training_tasks(dist: &TaskDistribution, n: usize, seed: u64) -> Result<Vec<Task>> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one training task".into()));
    }
    Ok(match dist.kind {
        VariationKind::LambdaVariation => {
            let (lo, hi) = dist.lambda_range;
            linspace(lo, hi, n)
                .into_iter()
                .enumerate()
                .map(|(i, lambda)| Task {
                    task_id: i,
                    lambda,
                    x0: dist.fixed_x0.clone(),
                })
                .collect()
        }
        VariationKind::X0Variation => latin_hypercube(n, &dist.x0_box, seed)?
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, r)| Task {
                task_id: i,
                lambda: dist.fixed_lambda,
                x0: r.to_vec(),
            })
            .collect(),
    })
}

/// Salt separating validation draws from the training draw of the same seed.
const VALIDATION_SALT: u64 = 0x5eed_0f_7a11;

/// Validation tasks, numbered from `first_id`.
///
/// Lambda validation places one value in each of `n` equal cells of the range,
/// at the midpoint unless that hits an evenly spaced training grid of up to 16
/// values, in which case a golden-section offset is used. In-range
/// initial states are a reseeded Latin hypercube; out-of-range states are uniform
/// over the outer box minus the training box.
pub fn make_validation_tasks(
    dist: &TaskDistribution,
    kind: ValidationKind,
    n: usize,
    seed: u64,
    first_id: usize,
) -> Result<Vec<Task>> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::Config("need at least one validation task".into()));
    }
    let mk = |i: usize, lambda: f64, x0: Vec<f64>| Task {
        task_id: first_id + i,
        lambda,
        x0,
    };
    match (dist.kind, kind) {
        (VariationKind::LambdaVariation, ValidationKind::InRange) => {
            let (lo, hi) = dist.lambda_range;
            let cell = (hi - lo) / n as f64;
            let offsets = [0.5, 0.381_966_011_250_105_1, 0.618_033_988_749_894_9];
            // Training grids are linspaces over the same range.
            let collides = |v: f64| {
                (1..=16).any(|m| linspace(lo, hi, m).iter().any(|t| (t - v).abs() < 1e-9 * (hi - lo)))
            };
            let offset = offsets
                .iter()
                .copied()
                .find(|o| (0..n).all(|i| !collides(lo + (i as f64 + o) * cell)))
                .unwrap_or(0.5);
            Ok((0..n)
                .map(|i| mk(i, lo + (i as f64 + offset) * cell, dist.fixed_x0.clone()))
                .collect())
        }
        (VariationKind::LambdaVariation, ValidationKind::OutOfRange) => Err(Error::Config(
            "out-of-range validation is defined for the x0 distribution only".into(),
        )),
        (VariationKind::X0Variation, ValidationKind::InRange) => {
            let pts = latin_hypercube(n, &dist.x0_box, seed ^ VALIDATION_SALT)?;
            Ok(pts
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| mk(i, dist.fixed_lambda, r.to_vec()))
                .collect())
        }
        (VariationKind::X0Variation, ValidationKind::OutOfRange) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VALIDATION_SALT.rotate_left(17));
            let inside = |p: &[f64]| {
                p.iter()
                    .zip(&dist.x0_box)
                    .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
            };
            let mut tasks = Vec::with_capacity(n);
            while tasks.len() < n {
                let p: Vec<f64> = dist
                    .x0_outer_box
                    .iter()
                    .map(|(lo, hi)| rng.random_range(*lo..*hi))
                    .collect();
                if !inside(&p) {
                    tasks.push(mk(tasks.len(), dist.fixed_lambda, p));
                }
            }
            Ok(tasks)
        }
    }
}

/// Samples `(x(t), z(t))` of one task on `t = k dt`, with outputs `y(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub times: Vec<f64>,
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array2<f64>,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (
            self.x.select(Axis(0), idx),
            self.z.select(Axis(0), idx),
            self.y.select(Axis(0), idx),
        )
    }
}

/// Measurement noise used when generating a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetNoise {
    pub spec: NoiseSpec,
    /// Also perturb the stored `x` and `z` labels. Off for every built-in
    /// experiment: the labels stay the noise-free reference.
    pub perturb_labels: bool,
}

/// Backward-samples `z(0) = F(x0)` and co-simulates plant and filter over
/// `[0, n_steps dt]`.
///
/// With noise, the filter is driven by `y = h(x + w_x) + w_y`; the stored `x`
/// and `z` remain the noise-free reference unless `perturb_labels` is set.
pub fn generate_task_dataset(
    task: &Task,
    model: &dyn SystemModel,
    design: &ObserverDesign,
    cfg: &BackwardSamplingConfig,
    dt: f64,
    n_steps: usize,
    noise: Option<&DatasetNoise>,
) -> Result<TaskDataset> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dataset step must be positive, got {dt}")));
    }
    let init = backward_sample_init(model, design, &task.x0, cfg, dt)?;
    let x_traj = if n_steps == 0 {
        Trajectory {
            times: vec![0.0],
            states: Array2::from_shape_vec((1, task.x0.len()), task.x0.clone())
                .map_err(|e| Error::shape("generate_task_dataset", e.to_string()))?,
        }
    } else {
        sim::simulate(model, &task.x0, &SimGrid::new(0.0, dt, n_steps)?)?
    };
    let y_clean = model.output_rows(&x_traj.states)?;
    let z_clean = run_observer(design, &init.z0, &y_clean, 0.0, dt)?;

    let Some(noise) = noise.filter(|n| !n.spec.is_zero()) else {
        return Ok(TaskDataset {
            task: task.clone(),
            times: x_traj.times,
            x: x_traj.states,
            z: z_clean.states,
            y: y_clean,
        });
    };

    let (x_noisy, _) = apply_noise(&x_traj, &y_clean, &NoiseSpec { var_y: 0.0, ..noise.spec })?;
    let y_from_noisy = model.output_rows(&x_noisy.states)?;
    let (_, y) = apply_noise(
        &x_traj,
        &y_from_noisy,
        &NoiseSpec {
            var_x: 0.0,
            seed: noise.spec.seed.wrapping_add(1),
            ..noise.spec
        },
    )?;
    let (x, z) = if noise.perturb_labels {
        let z = run_observer(design, &init.z0, &y, 0.0, dt)?;
        (x_noisy.states, z.states)
    } else {
        (x_traj.states, z_clean.states)
    };
    Ok(TaskDataset {
        task: task.clone(),
        times: x_traj.times,
        x,
        z,
        y,
    })
}

/// Generates datasets for all tasks in parallel; results keep task order.
pub fn generate_datasets(
    tasks: &[Task],
    design: &ObserverDesign,
    cfg: &BackwardSamplingConfig,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<TaskDataset>> {
    tasks
        .par_iter()
        .map(|t| generate_task_dataset(t, &t.model(), design, cfg, dt, n_steps, None))
        .collect()
}

/// Disjoint uniformly random adaptation and query row sets. The query set is
/// every row not drawn for adaptation, in random order.
pub fn split_adapt_query(
    n_rows: usize,
    n_adapt_points: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_adapt_points >= n_rows {
        return Err(Error::InsufficientData(format!(
            "{n_adapt_points} adaptation points requested from {n_rows} rows"
        )));
    }
    let mut idx: Vec<usize> = (0..n_rows).collect();
    idx.shuffle(rng);
    let query = idx.split_off(n_adapt_points);
    Ok((idx, query))
}

/// Union of task datasets with a flat `(task position, row)` index.
#[derive(Debug, Clone)]
pub struct MixedDataset {
    pub tasks: Vec<TaskDataset>,
    pub index: Vec<(usize, usize)>,
}

impl MixedDataset {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() || tasks.iter().all(|t| t.is_empty()) {
            return Err(Error::InsufficientData("mixed dataset has no rows".into()));
        }
        let index = tasks
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |r| (i, r)))
            .collect();
        Ok(Self { tasks, index })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn stack(&self, pick: impl Fn(&TaskDataset) -> &Array2<f64>) -> Array2<f64> {
        let views: Vec<_> = self.tasks.iter().map(|t| pick(t).view()).collect();
        concatenate(Axis(0), &views).expect("tasks share column counts")
    }

    /// All states, stacked in index order.
    pub fn x(&self) -> Array2<f64> {
        self.stack(|t| &t.x)
    }

    pub fn z(&self) -> Array2<f64> {
        self.stack(|t| &t.z)
    }

    pub fn y(&self) -> Array2<f64> {
        self.stack(|t| &t.y)
    }
}
