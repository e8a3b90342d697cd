//! Run configuration: one JSON document holding every module's settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{SamplingStrategy, StrategyKind};
use crate::data::{DatasetManifest, TaskDataset, TaskDistribution, VariationKind, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::observer::{compute_tau, default_design, BackwardSamplingConfig, ObserverDesign};
use crate::sim::NoiseSpec;
use crate::train::{MetaConfig, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ObserverSection {
    /// Diagonal of `A`; defaults to `-(1..=2 dx + 1)`.
    #[serde(default)]
    pub a_diag: Option<Vec<f64>>,
    /// Input vector `B`; defaults to ones.
    #[serde(default)]
    pub b: Option<Vec<f64>>,
    #[serde(default)]
    pub sampling: BackwardSamplingConfig,
}

impl ObserverSection {
    pub fn design(&self, dx: usize) -> Result<ObserverDesign> {
        let d = default_design(dx);
        ObserverDesign::new(
            self.a_diag.clone().unwrap_or(d.a_diag),
            self.b.clone().unwrap_or(d.b),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub dt: f64,
    /// Length of each training trajectory (s).
    pub train_horizon: f64,
    /// Length of each evaluation trajectory (s).
    pub eval_horizon: f64,
    pub n_train_tasks: usize,
    /// Seed of the task sampling (training and validation sets).
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            dt: 0.02,
            train_horizon: 20.0,
            eval_horizon: 50.0,
            n_train_tasks: 5,
            seed: 0,
        }
    }
}

fn steps(horizon: f64, dt: f64) -> usize {
    (horizon / dt).round() as usize
}

impl DatasetSection {
    pub fn train_steps(&self) -> usize {
        steps(self.train_horizon, self.dt)
    }

    pub fn eval_steps(&self) -> usize {
        steps(self.eval_horizon, self.dt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationSection {
    pub strategy: StrategyKind,
    /// Samples per adaptation batch.
    pub n_batch: usize,
    /// Window length of the random-window strategies (s).
    pub window_length: f64,
    /// Delay of the delayed strategies (s); `-tau` when absent.
    #[serde(default)]
    pub delay: Option<f64>,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Minimum,
            n_batch: 32,
            window_length: 50.0,
            delay: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Validation tasks inside the training range.
    pub n_val: usize,
    /// Validation tasks outside the training range (x0 experiment).
    pub n_val_out: usize,
    /// Divide the sum of `N + 1` samples by `N` when averaging over time.
    pub literal_time_mean: bool,
    /// Start of error aggregation (s); `-tau` when absent.
    #[serde(default)]
    pub transient_start: Option<f64>,
    /// Noise of the noisy evaluation pass.
    pub noise: NoiseSpec,
    pub grid_resolution: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Parallel, Method::Sequential, Method::Pinn, Method::Meta],
            seeds: vec![0],
            n_val: 50,
            n_val_out: 20,
            literal_time_mean: true,
            transient_start: None,
            noise: NoiseSpec { var_x: 0.1, var_y: 0.0, seed: 0 },
            grid_resolution: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tasks: TaskDistribution,
    #[serde(default)]
    pub observer: ObserverSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub adaptation: AdaptationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// Lambda-variation experiment defaults.
    pub fn lambda_default() -> Self {
        Self {
            tasks: TaskDistribution::lambda_default(),
            observer: ObserverSection::default(),
            dataset: DatasetSection::default(),
            training: TrainConfig::default(),
            meta: MetaConfig { pretrain: true, ..MetaConfig::default() },
            adaptation: AdaptationSection::default(),
            evaluation: EvaluationSection::default(),
        }
    }

    /// Initial-state-variation experiment defaults.
    pub fn x0_default() -> Self {
        Self {
            tasks: TaskDistribution::x0_default(),
            dataset: DatasetSection { n_train_tasks: 20, ..DatasetSection::default() },
            evaluation: EvaluationSection { n_val: 20, ..EvaluationSection::default() },
            ..Self::lambda_default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.tasks.validate()?;
        self.observer.sampling.validate()?;
        self.design()?;
        self.training.validate()?;
        self.meta.validate()?;
        let d = &self.dataset;
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return Err(Error::Config(format!("dataset.dt must be positive, got {}", d.dt)));
        }
        if !(d.train_horizon >= 0.0) || !(d.eval_horizon > 0.0) {
            return Err(Error::Config("dataset horizons must be positive".into()));
        }
        if d.n_train_tasks == 0 {
            return Err(Error::Config("dataset.n_train_tasks must be at least 1".into()));
        }
        if self.adaptation.n_batch == 0 {
            return Err(Error::Config("adaptation.n_batch must be at least 1".into()));
        }
        if let Some(delay) = self.adaptation.delay {
            if !(delay >= 0.0) {
                return Err(Error::Config(format!("adaptation.delay must be >= 0, got {delay}")));
            }
        }
        self.evaluation.noise.validate()?;
        if self.evaluation.methods.is_empty() {
            return Err(Error::Config("evaluation.methods must not be empty".into()));
        }
        if self.evaluation.n_val == 0 {
            return Err(Error::Config("evaluation.n_val must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Hash of the sections that determine trained weights (tasks, observer,
    /// dataset, training, meta). Checkpoints carry this one, so evaluation
    /// settings can change without invalidating them.
    pub fn training_hash(&self) -> String {
        let value = serde_json::json!({
            "tasks": self.tasks,
            "observer": self.observer,
            "dataset": self.dataset,
            "training": self.training,
            "meta": self.meta,
        });
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn dataset_manifest(&self, datasets: &[TaskDataset]) -> DatasetManifest {
        DatasetManifest {
            format_version: MANIFEST_VERSION,
            config_hash: self.hash(),
            seed: self.dataset.seed,
            dt: self.dataset.dt,
            n_steps: datasets.first().map(|d| d.len().saturating_sub(1)).unwrap_or(0),
            tasks: datasets.iter().map(|d| d.task.clone()).collect(),
            config: serde_json::to_value(self).expect("config serializes"),
        }
    }

    pub fn design(&self) -> Result<ObserverDesign> {
        self.observer.design(self.tasks.fixed_x0.len().max(2))
    }

    /// Transient length `-tau` for the default unit bound on `||z(tau)||`.
    pub fn settle_time(&self) -> Result<f64> {
        let s = &self.observer.sampling;
        Ok(-compute_tau(&self.design()?, s.epsilon, s.z_norm_bound.unwrap_or(1.0))?)
    }

    pub fn transient_start(&self) -> Result<f64> {
        match self.evaluation.transient_start {
            Some(t) => Ok(t),
            None => self.settle_time(),
        }
    }

    pub fn strategy(&self, kind: StrategyKind) -> Result<SamplingStrategy> {
        let delay = match self.adaptation.delay {
            Some(d) => d,
            None => self.settle_time()?,
        };
        let s = SamplingStrategy {
            kind,
            window_length: self.adaptation.window_length,
            delay: if kind.is_delayed() { delay } else { 0.0 },
        };
        s.validate()?;
        Ok(s)
    }

    pub fn is_lambda_experiment(&self) -> bool {
        self.tasks.kind == VariationKind::LambdaVariation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_hash_is_stable() {
        let cfg = RunConfig::lambda_default();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.training.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
        assert_eq!(cfg.dataset.train_steps(), 1000);
        assert_eq!(cfg.dataset.eval_steps(), 2500);
    }

    #[test]
    fn training_hash_ignores_evaluation_settings() {
        let cfg = RunConfig::lambda_default();
        let mut eval_only = cfg.clone();
        eval_only.adaptation.strategy = StrategyKind::WindowRandom;
        eval_only.evaluation.n_val = 7;
        assert_eq!(eval_only.training_hash(), cfg.training_hash());
        assert_ne!(eval_only.hash(), cfg.hash());
        let mut trained = cfg.clone();
        trained.meta.first_order = true;
        assert_ne!(trained.training_hash(), cfg.training_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(RunConfig::lambda_default()).unwrap();
        v["training"]["momentum"] = serde_json::json!(0.5);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        let mut v = serde_json::to_value(RunConfig::lambda_default()).unwrap();
        v["surprise"] = serde_json::json!(true);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn empty_lambda_range_names_the_field() {
        let mut cfg = RunConfig::lambda_default();
        cfg.tasks.lambda_range = (3.0, 3.0);
        let err = RunConfig::from_json(&cfg.to_json()).unwrap_err();
        assert!(err.to_string().contains("lambda_range"), "{err}");
    }

    #[test]
    fn delayed_strategy_waits_for_the_transient() {
        let cfg = RunConfig::lambda_default();
        let s = cfg.strategy(StrategyKind::MinimumDelayed).unwrap();
        assert!((s.delay - 13.8155).abs() < 1e-4);
        assert_eq!(cfg.strategy(StrategyKind::WindowRandom).unwrap().delay, 0.0);
        assert!((cfg.transient_start().unwrap() - s.delay).abs() < 1e-12);
    }
}
