use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use metakkl::adapt::StrategyKind;
use metakkl::checkpoint::Checkpoint;
use metakkl::config::RunConfig;
use metakkl::data::{read_dataset_dir, write_dataset_dir, MixedDataset, Task};
use metakkl::eval::{
    error_profile_grid, evaluate_lambda, evaluate_sampling, evaluate_task, evaluate_x0, run_experiment_lambda,
    run_experiment_sampling, run_experiment_x0, train_estimators, training_pool, EvalOptions, Estimator,
};
use metakkl::train::{
    meta_initial_eta, train_meta, train_parallel_mixed, train_sequential_mixed, write_loss_history, Method,
    TrainConfig,
};
use metakkl::Error;

const THETA_FILE: &str = "theta.ckpt.json";
const ETA_FILE: &str = "eta.ckpt.json";
const META_FILE: &str = "meta.ckpt.json";

#[derive(Parser)]
#[command(name = "metakkl", version, about = "Learning-based KKL observers with meta-learned adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults to the built-in config of `--experiment`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training and evaluation seed (overrides the config).
    #[arg(long, global = true, env = "METAKKL_SEED")]
    seed: Option<u64>,
    /// Worker threads; all processors by default.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    experiment: Option<ExperimentArg>,
    /// Sampling strategy of online adaptation.
    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,
    /// Start meta-training from a parallel-trained inverse map.
    #[arg(long, global = true)]
    pretrain: bool,
    /// Weight of the PDE residual for `--method pinn`.
    #[arg(long, global = true)]
    pinn_weight: Option<f64>,
    /// First-order meta-gradients.
    #[arg(long, global = true)]
    first_order: bool,
    /// Accept checkpoints trained with a different configuration.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training datasets of a configuration.
    Generate,
    /// Train one method on a generated dataset directory.
    Train {
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "parallel")]
        method: MethodArg,
    },
    /// Run an experiment, with all methods trained in place or from checkpoints.
    Eval {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Label for checkpoints that do not record their method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Adapt a meta-learned observer online on one task.
    Adapt {
        /// Checkpoint directory holding a meta checkpoint.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Duffing parameter of the task; the config's fixed value by default.
        #[arg(long)]
        lambda: Option<f64>,
        /// Initial state, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Parallel,
    Sequential,
    Pinn,
    Meta,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Parallel => Method::Parallel,
            MethodArg::Sequential => Method::Sequential,
            MethodArg::Pinn => Method::Pinn,
            MethodArg::Meta => Method::Meta,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ExperimentArg {
    Lambda,
    X0,
    Grid,
    Sampling,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Minimum,
    MinimumDelayed,
    WindowRandom,
    WindowRandomDelayed,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Minimum => StrategyKind::Minimum,
            StrategyArg::MinimumDelayed => StrategyKind::MinimumDelayed,
            StrategyArg::WindowRandom => StrategyKind::WindowRandom,
            StrategyArg::WindowRandomDelayed => StrategyKind::WindowRandomDelayed,
        }
    }
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_numerical() { 3 } else { 2 }, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Config file (or experiment default) with the command-line overrides applied.
fn effective_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None if c.experiment == Some(ExperimentArg::X0) => RunConfig::x0_default(),
        None => RunConfig::lambda_default(),
    };
    if let Some(seed) = c.seed {
        cfg.training.seed = seed;
        cfg.evaluation.seeds = vec![seed];
    }
    if let Some(s) = c.strategy {
        cfg.adaptation.strategy = s.into();
    }
    if c.pretrain {
        cfg.meta.pretrain = true;
    }
    if c.first_order {
        cfg.meta.first_order = true;
    }
    if let Some(w) = c.pinn_weight {
        cfg.training.pinn_weight = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, default: &str) -> CliResult<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::write(dir.join("config.json"), cfg.to_json()).map_err(Error::from)?;
    Ok(())
}

fn cmd_generate(c: &Common) -> CliResult<()> {
    let cfg = effective_config(c)?;
    let dir = out_dir(c, "data")?;
    let pool = training_pool(&cfg)?;
    write_dataset_dir(&dir, &pool, &cfg.dataset_manifest(&pool))?;
    info!("wrote {} task files to {}", pool.len(), dir.display());
    Ok(())
}

fn save(dir: &Path, file: &str, ckpt: Checkpoint) -> CliResult<()> {
    ckpt.save(&dir.join(file))?;
    Ok(())
}

fn cmd_train(c: &Common, data: &Path, method: Method) -> CliResult<()> {
    let cfg = effective_config(c)?;
    let (manifest, pool) = read_dataset_dir(data)?;
    if manifest.dt != cfg.dataset.dt {
        return Err(usage(format!(
            "dataset step {} differs from the config's dataset.dt {}",
            manifest.dt, cfg.dataset.dt
        )));
    }
    let dir = out_dir(c, "checkpoints")?;
    let hash = cfg.training_hash();
    let seed = cfg.training.seed;
    let tcfg = TrainConfig { method, ..cfg.training.clone() };
    let mixed = MixedDataset::new(pool.clone())?;
    let ckpt = |p, alpha| Checkpoint::from_params(p, alpha, &hash, seed).with_method(method.name());
    match method {
        Method::Parallel => {
            let maps = train_parallel_mixed(&mixed, &tcfg)?;
            save(&dir, THETA_FILE, ckpt(&maps.theta, None))?;
            save(&dir, ETA_FILE, ckpt(&maps.eta, None))?;
            write_loss_history(&dir.join("loss_history.csv"), &maps.history)?;
        }
        Method::Sequential | Method::Pinn => {
            let model = pool[0].task.model();
            let maps = train_sequential_mixed(&mixed, &tcfg, &model, &cfg.design()?)?;
            save(&dir, THETA_FILE, ckpt(&maps.theta, None))?;
            save(&dir, ETA_FILE, ckpt(&maps.eta, None))?;
            write_loss_history(&dir.join("loss_history.csv"), &maps.history)?;
        }
        Method::Meta => {
            // The forward map always comes from parallel training; the
            // inverse map starts from it only when pretraining.
            let parallel = train_parallel_mixed(&mixed, &TrainConfig { method: Method::Parallel, ..tcfg.clone() })?;
            write_loss_history(&dir.join("pretrain_loss_history.csv"), &parallel.history)?;
            let eta0 = if cfg.meta.pretrain {
                parallel.eta.clone()
            } else {
                meta_initial_eta(&pool, &tcfg, &cfg.meta)?
            };
            let state = train_meta(&pool, eta0.clone(), &tcfg, &cfg.meta, &pool[0].task.model())?;
            save(&dir, THETA_FILE, ckpt(&parallel.theta, None))?;
            save(&dir, ETA_FILE, ckpt(&eta0, None))?;
            save(&dir, META_FILE, ckpt(&state.eta, Some(state.alpha)))?;
            write_loss_history(&dir.join("loss_history.csv"), &state.history)?;
            info!("meta-training finished with alpha = {:e}", state.alpha);
        }
    }
    write_config(&dir, &cfg)?;
    Ok(())
}

fn load_checked(path: &Path, cfg: &RunConfig, force: bool) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(usage(format!("missing checkpoint {}", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let expected = cfg.training_hash();
    if ckpt.config_hash != expected {
        if !force {
            return Err(usage(format!(
                "{} was trained with configuration {} but the current one is {}; pass --force to use it anyway",
                path.display(),
                ckpt.config_hash,
                expected
            )));
        }
        warn!("{}: configuration hash mismatch ignored (--force)", path.display());
    }
    Ok(ckpt)
}

/// Estimator from a checkpoint directory: the meta checkpoint when present,
/// the plain inverse map otherwise.
fn load_estimator(dir: &Path, cfg: &RunConfig, force: bool, label: Option<Method>) -> CliResult<Estimator> {
    let theta = load_checked(&dir.join(THETA_FILE), cfg, force)?;
    let meta_path = dir.join(META_FILE);
    let eta = if meta_path.exists() {
        load_checked(&meta_path, cfg, force)?
    } else {
        load_checked(&dir.join(ETA_FILE), cfg, force)?
    };
    let recorded = eta.method.as_deref().map(str::parse::<Method>).transpose()?;
    let method = match (eta.alpha, recorded, label) {
        (Some(_), _, _) => Method::Meta,
        (None, Some(m), _) => m,
        (None, None, Some(m)) => m,
        (None, None, None) => Method::Parallel,
    };
    Ok(Estimator {
        method,
        theta: theta.params()?,
        eta: eta.params()?,
        alpha: eta.alpha,
        n_adapt: if eta.alpha.is_some() { cfg.meta.n_adapt } else { 0 },
    })
}

fn cmd_eval(c: &Common, checkpoints: Option<&Path>, label: Option<Method>) -> CliResult<()> {
    let cfg = effective_config(c)?;
    let experiment = c
        .experiment
        .ok_or_else(|| usage("eval needs --experiment <lambda|x0|grid|sampling>"))?;
    let dir = out_dir(c, "results")?;
    let seed = cfg.training.seed;
    let est = checkpoints
        .map(|d| load_estimator(d, &cfg, c.force, label))
        .transpose()?;
    match (experiment, est) {
        (ExperimentArg::Lambda, None) => run_experiment_lambda(&cfg)?.write(&dir, "")?,
        (ExperimentArg::Lambda, Some(e)) => evaluate_lambda(&[e], &cfg, seed)?.write(&dir, "")?,
        (ExperimentArg::X0, None) => run_experiment_x0(&cfg)?.write(&dir)?,
        (ExperimentArg::X0, Some(e)) => evaluate_x0(&[e], &cfg, seed)?.write(&dir)?,
        (ExperimentArg::Sampling, None) => run_experiment_sampling(&cfg)?.write(&dir, "")?,
        (ExperimentArg::Sampling, Some(e)) => {
            if e.alpha.is_none() {
                return Err(usage("the sampling experiment needs a meta checkpoint (meta.ckpt.json)"));
            }
            evaluate_sampling(&e, &cfg, seed)?.write(&dir, "")?
        }
        (ExperimentArg::Grid, Some(e)) => error_profile_grid(&e, cfg.evaluation.grid_resolution, &cfg, seed)?.write(&dir)?,
        (ExperimentArg::Grid, None) => {
            let pool = training_pool(&cfg)?;
            for e in train_estimators(&cfg, &pool, seed)? {
                error_profile_grid(&e, cfg.evaluation.grid_resolution, &cfg, seed)?.write(&dir.join(e.method.name()))?;
            }
        }
    }
    write_config(&dir, &cfg)?;
    info!("wrote results to {}", dir.display());
    Ok(())
}

fn cmd_adapt(c: &Common, checkpoints: &Path, lambda: Option<f64>, x0: Option<Vec<f64>>) -> CliResult<()> {
    let cfg = effective_config(c)?;
    let est = load_estimator(checkpoints, &cfg, c.force, None)?;
    let alpha = est
        .alpha
        .ok_or_else(|| usage(format!("{} holds no meta checkpoint with an adaptation rate", checkpoints.display())))?;
    let x0 = x0.unwrap_or_else(|| cfg.tasks.fixed_x0.clone());
    if x0.len() != 2 {
        return Err(usage(format!("--x0 needs 2 values, got {}", x0.len())));
    }
    let task = Task { task_id: 0, lambda: lambda.unwrap_or(cfg.tasks.fixed_lambda), x0 };
    if !(task.lambda > 0.0) {
        return Err(usage(format!("--lambda must be positive, got {}", task.lambda)));
    }
    let dir = out_dir(c, "adapt")?;
    let seed = cfg.training.seed;
    // The configured horizon is used as is: a too short trajectory is an error.
    let opts = EvalOptions { strategy: cfg.adaptation.strategy, noise: None, n_steps: cfg.dataset.eval_steps() };
    let before = evaluate_task(&Estimator { alpha: None, ..est.clone() }, &task, &cfg, &opts, seed)?;
    let after = evaluate_task(&est, &task, &cfg, &opts, seed)?;
    let (eta, ly) = match &after.adapt {
        Some(a) => (a.eta.clone(), Some((a.ly_before, a.ly_after, a.t_init))),
        None => (est.eta.clone(), None),
    };
    Checkpoint::from_params(&eta, Some(alpha), &cfg.training_hash(), seed)
        .with_method(Method::Meta.name())
        .save(&dir.join("eta_adapted.ckpt.json"))?;
    let report = json!({
        "task": task,
        "strategy": cfg.adaptation.strategy.name(),
        "seed": seed,
        "n_adapt": est.n_adapt,
        "alpha": alpha,
        "e_bar_t_before": before.e_bar_t,
        "e_bar_t_after": after.e_bar_t,
        "ly_before": ly.map(|v| v.0),
        "ly_after": ly.map(|v| v.1),
        "t_init": ly.map(|v| v.2),
    });
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
    fs::write(dir.join("adapt.json"), &text).map_err(Error::from)?;
    println!("e_bar_t before {:.6e} after {:.6e}", before.e_bar_t, after.e_bar_t);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.common.jobs {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| usage(format!("cannot start {jobs} workers: {e}")))?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Generate => cmd_generate(c),
        Command::Train { data, method } => cmd_train(c, &data, method.into()),
        Command::Eval { checkpoints, method } => cmd_eval(c, checkpoints.as_deref(), method.map(Into::into)),
        Command::Adapt { checkpoints, lambda, x0 } => cmd_adapt(c, &checkpoints, lambda, x0),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
