//! `mccl` command-line driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mccl::config::{EvalK, KGrid, RunConfig};
use mccl::eval::{embed_dataset, estimate_k, evaluate, EvalError, EvalSpace};
use mccl::features::{generate_synthetic, load_dataset, save_dataset, FeatureError};
use mccl::trainer::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use mccl::trainer::gradcheck::{grad_check, grad_check_instance, GradCheckSetup, DEFAULT_STEP};
use mccl::trainer::{train_two_stage, write_metrics_csv, TrainError};
use mccl::voting::{level_seed, write_matrix_csv, VoteRefresher, VotingError};
use mccl::{ConfigError, Dataset, ModelParamsF32, Scalar};

#[derive(Parser)]
#[command(name = "mccl", version, about = "Generalized category discovery over feature triples")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature file.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both training stages and write a checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Cluster, match and print an evaluation report as JSON.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "estimate_k")]
        k: Option<usize>,
        /// Pick k from the grid using the labeled records.
        #[arg(long)]
        estimate_k: bool,
        /// Candidate k values, `a..b` or `a,b,c`.
        #[arg(long)]
        grid: Option<KGrid>,
        #[arg(long)]
        space: Option<EvalSpace>,
    },
    /// Dump the vote counts and consistency scores as CSV.
    Vote {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output prefix; writes `<out>.w.csv` and `<out>.c.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Precision::F64)]
        precision: Precision,
        /// Perturb one analytic gradient; the check must then fail.
        #[arg(long)]
        corrupt: bool,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        /// Defaults to 1e-3 for f32 and 1e-6 for f64.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

enum Failure {
    Gradcheck,
    Config(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Gradcheck => 1,
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => Failure::Io(io.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<FeatureError> for Failure {
    fn from(e: FeatureError) -> Self {
        match e {
            FeatureError::InvalidConfig(_) | FeatureError::BatchSize(_) => Failure::Config(e.to_string()),
            other => Failure::Io(other.to_string()),
        }
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<VotingError> for Failure {
    fn from(e: VotingError) -> Self {
        match e {
            VotingError::Levels(_) | VotingError::Eta(_) => Failure::Config(e.to_string()),
            other => Failure::Numeric(other.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadK { .. } | EvalError::KBelowKnown { .. } | EvalError::EmptyGrid => {
                Failure::Config(e.to_string())
            }
            EvalError::Voting(v) => v.into(),
            other => Failure::Numeric(other.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Failure::Config(e.to_string()),
            TrainError::Features(f) => f.into(),
            TrainError::Voting(v) => v.into(),
            TrainError::Eval(v) => v.into(),
            other => Failure::Numeric(other.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn write_sidecar(cfg: &RunConfig, next_to: &Path) -> Result<(), Failure> {
    std::fs::write(sidecar(next_to), cfg.dump())?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    Ok(load_dataset(path)?)
}

fn cmd_gen(config: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = generate_synthetic(&cfg.data)?;
    save_dataset(&ds, out)?;
    write_sidecar(&cfg, out)?;
    println!("{} classes, {} records", ds.num_classes_total, ds.len());
    Ok(())
}

fn cmd_train(config: Option<&Path>, data: &Path, out: &Path, metrics: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_data(data)?;
    let outcome = train_two_stage::<f32>(&ds, &cfg.train)?;
    save_checkpoint(&outcome.params, out)?;
    let mut w = BufWriter::new(File::create(metrics)?);
    write_metrics_csv(&mut w, &outcome.metrics)?;
    w.flush()?;
    write_sidecar(&cfg, out)?;
    if let Some(last) = outcome.metrics.last() {
        eprintln!(
            "epoch {}: all {:.4} old {:.4} new {:.4}",
            last.epoch, last.all_acc, last.old_acc, last.new_acc
        );
    }
    Ok(())
}

fn load_model(path: &Path, ds: &Dataset) -> Result<ModelParamsF32, Failure> {
    let params: ModelParamsF32 = load_checkpoint(path)?;
    let dims = params.dims();
    if dims.input != ds.dim || dims.classes != ds.num_classes_total {
        return Err(Failure::Config(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            dims.input, dims.classes, ds.dim, ds.num_classes_total
        )));
    }
    Ok(params)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    config: Option<&Path>,
    checkpoint: &Path,
    data: &Path,
    k: Option<usize>,
    estimate: bool,
    grid: Option<KGrid>,
    space: Option<EvalSpace>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_data(data)?;
    let params = load_model(checkpoint, &ds)?;
    let mut ecfg = cfg.eval_config();
    if let Some(s) = space {
        ecfg.space = s;
    }
    let mode = match (k, estimate) {
        (Some(k), _) => EvalK::Fixed(k),
        (None, true) => EvalK::Auto,
        (None, false) => cfg.eval_k,
    };
    let k = match mode {
        EvalK::Fixed(k) => k,
        EvalK::Classes => ds.num_classes_total,
        EvalK::Auto => {
            let grid = grid
                .unwrap_or_else(|| cfg.k_grid.clone())
                .resolve(ds.known_classes.len(), ds.num_classes_total);
            estimate_k(&ds, &params, &grid, &ecfg)?.k
        }
    };
    let report = evaluate(&ds, &params, k, &ecfg)?;
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_vote(config: Option<&Path>, checkpoint: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let ds = load_data(data)?;
    let params = load_model(checkpoint, &ds)?;
    let emb = embed_dataset(&ds, &params, EvalSpace::ProjStf, &cfg.train.fusion)
        .map_err(|e| Failure::Numeric(e.to_string()))?;
    let table = VoteRefresher::new::<f32>(&ds, cfg.train.vote, level_seed(cfg.train.seed, 0))?.refresh(&emb)?;
    let ids: Vec<u64> = ds.records.iter().map(|r| r.id).collect();
    let n = ds.len();
    let with_suffix = |suffix: &str| {
        let mut s = out.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let mut w = BufWriter::new(File::create(with_suffix(".w.csv"))?);
    write_matrix_csv(&mut w, &ids, n, |i, j| table.w.get(i, j).to_string())?;
    w.flush()?;
    let mut c = BufWriter::new(File::create(with_suffix(".c.csv"))?);
    write_matrix_csv(&mut c, &ids, n, |i, j| table.c.get(i, j).to_string())?;
    c.flush()?;
    Ok(())
}

fn run_gradcheck<T: Scalar>(corrupt: bool, step: f64, tol: f64, seed: u64) -> Result<(), Failure> {
    let setup = GradCheckSetup {
        seed,
        ..GradCheckSetup::default()
    };
    let (params, ctx, obj) = grad_check_instance::<T>(&setup)?;
    let report = grad_check(&params, &ctx, &obj, step, tol, corrupt)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Gradcheck)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Gen { config, out } => cmd_gen(config.as_deref(), &out),
        Command::Train {
            config,
            data,
            out,
            metrics,
        } => cmd_train(config.as_deref(), &data, &out, &metrics),
        Command::Eval {
            config,
            checkpoint,
            data,
            k,
            estimate_k,
            grid,
            space,
        } => cmd_eval(config.as_deref(), &checkpoint, &data, k, estimate_k, grid, space),
        Command::Vote {
            config,
            checkpoint,
            data,
            out,
        } => cmd_vote(config.as_deref(), &checkpoint, &data, &out),
        Command::Gradcheck {
            precision,
            corrupt,
            step,
            tol,
            seed,
        } => match precision {
            Precision::F32 => run_gradcheck::<f32>(corrupt, step, tol.unwrap_or(1e-3), seed),
            Precision::F64 => run_gradcheck::<f64>(corrupt, step, tol.unwrap_or(1e-6), seed),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Gradcheck => eprintln!("error: gradient check failed"),
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Io(m) => eprintln!("i/o error: {m}"),
                Failure::Numeric(m) => eprintln!("numeric error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}
