//! `fibro` command-line pipeline: registration, patch extraction,
//! classification, staging, evaluation and overlays.

pub mod commands;
pub mod config;
pub mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fibro_core::ContrastMode;

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments; exit code 2.
    Config(String),
    /// Some subjects failed and were skipped; exit code 1.
    Partial { failed: usize, total: usize },
    /// The command could not complete; exit code 1.
    Failed(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Partial { failed, total } => write!(f, "{failed} of {total} subjects failed"),
            CliError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Partial { .. } | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fibro", version, about = "Patch-based liver fibrosis staging pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-subject parallelism.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(long, global = true, value_parser = parse_mode)]
    pub mode: Option<ContrastMode>,
}

fn parse_mode(s: &str) -> Result<ContrastMode, String> {
    s.parse()
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Thresholds file written by `calibrate`.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    #[arg(long)]
    pub tau1: Option<f64>,
    #[arg(long)]
    pub tau2: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register every modality to GED4 and write aligned volumes.
    Register {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cut patches from aligned studies.
    Extract {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Patch file to write.
        #[arg(long)]
        out: PathBuf,
        /// Keep only stage 1 and 4 subjects, labeled and class-balanced.
        #[arg(long)]
        training: bool,
    },
    /// Train the baseline patch classifier.
    Train {
        /// Labeled patch file from `extract --training`.
        #[arg(long, conflicts_with = "manifest")]
        patches: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score patches with a trained model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "manifest")]
        patches: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Prediction CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit staging thresholds by cross-validation.
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        /// Manifest supplying the ground-truth stages.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Thresholds file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn patch predictions into subject scores and decisions.
    Stage {
        #[arg(long)]
        predictions: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        /// Staging report CSV to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract, classify, score and decide in one run.
    Pipeline {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Register the studies first.
        #[arg(long)]
        register: bool,
        /// Trained model; without it or `--predictions` a model is trained
        /// on the manifest's stage 1 and 4 subjects.
        #[arg(long, conflicts_with = "predictions")]
        model: Option<PathBuf>,
        /// External patch predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Dice and Hausdorff of predicted against reference organ masks.
    EvalSeg {
        /// Manifest whose `mask` entries are the predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Manifest whose `mask` entries are the references.
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC and accuracy of a staging report against manifest stages.
    EvalCls {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render patch predictions over a GED4 slice as PNG.
    Overlay {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        slice: usize,
        /// Integer upscaling of the output image.
        #[arg(long, default_value_t = 1)]
        scale: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic phantom cohort.
    Phantom {
        #[arg(long)]
        out: Option<PathBuf>,
        /// `fraction:stage:count`, repeatable.
        #[arg(long = "group", required = true, value_parser = parse_group)]
        groups: Vec<PhantomGroup>,
        /// `X,Y,Z` voxels.
        #[arg(long, default_value = "64,64,64", value_parser = parse_triple::<usize>)]
        dims: [usize; 3],
        /// `X,Y,Z` mm.
        #[arg(long, default_value = "2,2,2", value_parser = parse_triple::<f64>)]
        spacing: [f64; 3],
        /// Largest planted rotation per axis, degrees.
        #[arg(long, default_value_t = 0.0)]
        max_rotation: f64,
        /// Largest planted translation per axis, mm.
        #[arg(long, default_value_t = 0.0)]
        max_translation: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomGroup {
    pub fraction: f64,
    pub stage: u8,
    pub count: usize,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let v: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad value {p:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three comma-separated values, got {s:?}"))
}

fn parse_group(s: &str) -> Result<PhantomGroup, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [f, st, n] = parts[..] else {
        return Err(format!("expected fraction:stage:count, got {s:?}"));
    };
    let fraction: f64 = f.parse().map_err(|_| format!("bad fraction {f:?}"))?;
    let stage: u8 = st.parse().map_err(|_| format!("bad stage {st:?}"))?;
    let count: usize = n.parse().map_err(|_| format!("bad count {n:?}"))?;
    if !(0.0..=1.0).contains(&fraction) || !(1..=4).contains(&stage) {
        return Err(format!("group {s:?}: fraction must be in [0, 1] and stage in 1..4"));
    }
    Ok(PhantomGroup { fraction, stage, count })
}

/// Build the effective configuration: config file, then global flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(j) = g.jobs {
        cfg.jobs = j;
    }
    if let Some(m) = g.mode {
        cfg.mode = m;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    if cfg.jobs == 0 {
        return Err(CliError::Config("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| commands::dispatch(cfg, cli.command))
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
