//! Command-line front end: `generate`, `train`, `predict`, `eval`, `classify`
//! and `sweep`. Exit codes: 0 success, 2 usage or configuration error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetError, SystemDescriptor, TimeSeriesDataset};
use crate::edmd::{EdmdError, KoopmanModel, ModelExport};
use crate::metrics::{
    classify_basins, duffing_reconstruction_by_basin, efficiency_sweep, evaluate_eigen,
    minimum_parameters, reconstruction_errors, sample_box, EvalConfig, MetricsError,
};
use crate::networks::{Checkpoint, InitScale, NetworkError};
use crate::odeint::OdeError;
use crate::systems::{
    generate_duffing, generate_ks, DuffingDataConfig, DuffingParams, KsDataConfig, KsParams,
    Stepper, SystemError,
};
use crate::trainer::{train_with_observer, DictionaryKind, TrainConfig, TrainError};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "EDMD_DL_OUT_DIR";
pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(format!("I/O error: {e}"))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("malformed JSON: {e}"))
    }
}

impl From<SystemError> for CliError {
    fn from(e: SystemError) -> Self {
        match e {
            SystemError::Params(_) | SystemError::Dimension { .. } | SystemError::Dataset(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<EdmdError> for CliError {
    fn from(e: EdmdError) -> Self {
        match e {
            EdmdError::Dimension { .. } | EdmdError::Precondition(_) | EdmdError::Dataset(_) => {
                CliError::Usage(e.to_string())
            }
            EdmdError::Network(NetworkError::Integration(_)) => CliError::Numerical(e.to_string()),
            EdmdError::Network(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Usage(format!("invalid training configuration: {m}")),
            TrainError::Edmd(e) => e.into(),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Edmd(e) => e.into(),
            MetricsError::System(e) => e.into(),
            MetricsError::Train(e) => e.into(),
            MetricsError::Invalid(m) => CliError::Usage(m),
            MetricsError::ZeroNorm { .. } => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<OdeError> for CliError {
    fn from(e: OdeError) -> Self {
        match e {
            OdeError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "edmd-dl", version, about = "EDMD with learned MLP / neural-ODE dictionaries")]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a system and write a dataset file.
    Generate(GenerateArgs),
    /// Train a dictionary and Koopman model on a dataset.
    Train(TrainArgs),
    /// Predict a trajectory from an initial condition.
    Predict(PredictArgs),
    /// Reconstruction and eigenfunction errors of a model.
    Eval(EvalArgs),
    /// Duffing basin classification of random initial conditions.
    Classify(ClassifyArgs),
    /// Train several dictionary widths and report metric versus parameter count.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SystemKind {
    Duffing,
    Ks,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub system: SystemKind,
    /// Output dataset path (default `<out dir>/<system>.edmd`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the snapshots as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub trajectories: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// KS grid points.
    #[arg(long)]
    pub nx: Option<usize>,
    /// KS Euler substeps per sampling interval (default: automatic).
    #[arg(long)]
    pub substeps: Option<usize>,
    /// KS nonlinear term in conservative form.
    #[arg(long)]
    pub conservative: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DictChoice {
    Mlp,
    Node,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitChoice {
    Literal,
    Inverse,
    #[value(name = "fan_in")]
    FanIn,
}

impl From<InitChoice> for InitScale {
    fn from(c: InitChoice) -> Self {
        match c {
            InitChoice::Literal => InitScale::Literal,
            InitChoice::Inverse => InitScale::Inverse,
            InitChoice::FanIn => InitScale::FanIn,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dict: Option<DictChoice>,
    /// MLP width `l` or NODE width `l'`.
    #[arg(long)]
    pub width: Option<usize>,
    /// MLP hidden depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// NODE field width `l''`.
    #[arg(long)]
    pub field_width: Option<usize>,
    /// Total dictionary size `M`.
    #[arg(long)]
    pub dictionary_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub inner_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Range of the affine-map initialisation.
    #[arg(long, value_enum)]
    pub init_scale: Option<InitChoice>,
    /// Write a checkpoint every this many iterations.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Initial condition, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub ic: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Add the true trajectory and per-step error columns.
    #[arg(long)]
    pub truth: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Recon,
    Eigen,
    Both,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = Which::Both)]
    pub which: Which,
    /// Monte-Carlo samples for the eigenfunction error.
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Held-out trajectories (per basin for Duffing).
    #[arg(long, default_value_t = 50)]
    pub trajectories: usize,
    /// Prediction horizon for the reconstruction error.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    /// Metrics CSV path (default `<out dir>/metrics.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub samples: usize,
    #[arg(long, default_value_t = 49)]
    pub horizon: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepMetric {
    Classify,
    Recon,
    Eigen,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// NODE field widths `l''` to train.
    #[arg(long, value_delimiter = ',')]
    pub field_widths: Vec<usize>,
    /// MLP widths `l` to train.
    #[arg(long, value_delimiter = ',')]
    pub mlp_widths: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SweepMetric::Classify)]
    pub metric: SweepMetric,
    /// Threshold for the minimum-parameter report (accuracy for `classify`).
    #[arg(long, default_value_t = 1.0)]
    pub target: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// TOML training document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            checkpoint_every: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "unsupported config schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Model document written by `train`: the Koopman model plus the system it was trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub system: SystemDescriptor,
    pub model: ModelExport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Record of one command run and everything it wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// `12345` -> `12,345`.
pub fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("edmd-dl-out"))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

struct Outputs {
    artifacts: Vec<Artifact>,
}

impl Outputs {
    fn new() -> Self {
        Self {
            artifacts: Vec::new(),
        }
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        ensure_parent(path)?;
        fs::write(path, bytes)?;
        self.artifacts.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn manifest(
        self,
        path: &Path,
        command: &str,
        config_sha256: Option<String>,
        seed: u64,
        started: u64,
    ) -> Result<(), CliError> {
        let m = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256,
            seed,
            started_unix: started,
            finished_unix: unix_now(),
            artifacts: self.artifacts,
        };
        ensure_parent(path)?;
        fs::write(path, serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

fn read_dataset(path: &Path) -> Result<TimeSeriesDataset, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Usage(format!("cannot open dataset {}: {e}", path.display())))?;
    Ok(TimeSeriesDataset::read_binary(std::io::BufReader::new(file))?)
}

pub fn read_model(path: &Path) -> Result<(KoopmanModel, SystemDescriptor), CliError> {
    let text = fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read model {}: {e}", path.display())))?;
    let file: ModelFile = serde_json::from_slice(&text)?;
    Ok((KoopmanModel::from_export(&file.model)?, file.system))
}

/// Ground-truth stepper for a dataset descriptor.
pub fn stepper_for(system: &SystemDescriptor) -> Result<Box<dyn Stepper>, CliError> {
    match *system {
        SystemDescriptor::Duffing {
            alpha,
            beta,
            gamma,
            dt,
        } => Ok(Box::new(DuffingParams {
            alpha,
            beta,
            gamma,
            dt,
            ..DuffingParams::default()
        })),
        SystemDescriptor::Ks {
            length,
            nx,
            dt,
            substeps,
            conservative,
        } => Ok(Box::new(KsParams {
            length,
            nx,
            dt,
            substeps: Some(substeps),
            conservative,
        })),
        SystemDescriptor::Custom { ref label } => Err(CliError::Usage(format!(
            "no ground-truth simulator for system {label:?}"
        ))),
    }
}

fn duffing_params(system: &SystemDescriptor) -> Result<DuffingParams, CliError> {
    match *system {
        SystemDescriptor::Duffing {
            alpha,
            beta,
            gamma,
            dt,
        } => Ok(DuffingParams {
            alpha,
            beta,
            gamma,
            dt,
            ..DuffingParams::default()
        }),
        _ => Err(CliError::Usage("this command needs a Duffing model".into())),
    }
}

/// Parses arguments, configures the thread pool and runs the command.
pub fn run<I, T>(args: I, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli, out)
}

pub fn execute(cli: Cli, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))?;
    let seed = cli.seed;
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(a, seed, out),
        Command::Train(a) => cmd_train(a, seed, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Eval(a) => cmd_eval(a, seed, out),
        Command::Classify(a) => cmd_classify(a, seed, out),
        Command::Sweep(a) => cmd_sweep(a, seed, out),
    })
}

fn cmd_generate(a: GenerateArgs, seed: Option<u64>, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let started = unix_now();
    let seed = seed.unwrap_or(0);
    let ds = match a.system {
        SystemKind::Duffing => {
            let mut cfg = DuffingDataConfig::default();
            if let Some(t) = a.trajectories {
                cfg.trajectories = t;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            generate_duffing(&DuffingParams::default(), &cfg, seed)?
        }
        SystemKind::Ks => {
            let mut p = KsParams {
                substeps: a.substeps,
                conservative: a.conservative,
                ..KsParams::default()
            };
            if let Some(nx) = a.nx {
                p.nx = nx;
            }
            let mut cfg = KsDataConfig::default();
            if let Some(t) = a.trajectories {
                cfg.trajectories = t;
            }
            if let Some(s) = a.steps {
                cfg.steps = s;
            }
            generate_ks(&p, &cfg, seed)?
        }
    };
    let name = match a.system {
        SystemKind::Duffing => "duffing",
        SystemKind::Ks => "ks",
    };
    let dir = default_out_dir();
    let path = a.out.unwrap_or_else(|| dir.join(format!("{name}.edmd")));
    let mut files = Outputs::new();
    let mut bytes = Vec::new();
    ds.write_binary(&mut bytes)?;
    files.write(&path, &bytes)?;
    if let Some(csv) = &a.csv {
        let mut text = Vec::new();
        ds.write_csv(&mut text)?;
        files.write(csv, &text)?;
    }
    writeln!(out, "system: {name}")?;
    writeln!(out, "pairs (N): {}", ds.n_pairs())?;
    writeln!(out, "state dimension (d): {}", ds.d)?;
    writeln!(out, "rejections: {}", ds.rejections)?;
    writeln!(out, "wrote {}", path.display())?;
    let manifest = path.with_extension("manifest.json");
    files.manifest(&manifest, "generate", None, seed, started)
}

fn resolve_train_config(a: &TrainArgs, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", p.display()))
        })?)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(kind) = a.dict {
        let width = a.width.unwrap_or(match kind {
            DictChoice::Mlp => 170,
            DictChoice::Node => 120,
        });
        t.dictionary = match kind {
            DictChoice::Mlp => DictionaryKind::Mlp {
                width,
                depth: a.depth.unwrap_or(3),
            },
            DictChoice::Node => DictionaryKind::Node {
                width,
                field_width: a.field_width.unwrap_or(68),
                time_span: [0.0, 1.0],
            },
        };
    } else {
        match &mut t.dictionary {
            DictionaryKind::Mlp { width, depth } => {
                *width = a.width.unwrap_or(*width);
                *depth = a.depth.unwrap_or(*depth);
            }
            DictionaryKind::Node {
                width, field_width, ..
            } => {
                *width = a.width.unwrap_or(*width);
                *field_width = a.field_width.unwrap_or(*field_width);
            }
        }
    }
    macro_rules! set {
        ($($f:ident => $g:ident),*) => {$( if let Some(v) = a.$f { t.$g = v; } )*};
    }
    set!(dictionary_size => dictionary_size, lambda => lambda, epsilon => epsilon,
         learning_rate => learning_rate, max_epochs => max_epochs, inner_steps => inner_steps);
    if a.batch_size.is_some() {
        t.batch_size = a.batch_size;
    }
    if let Some(c) = a.init_scale {
        t.init_scale = c.into();
    }
    if let Some(s) = seed {
        t.seed = s;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    if cfg.checkpoint_every == Some(0) {
        return Err(CliError::Usage("checkpoint_every must be positive".into()));
    }
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let started = unix_now();
    let cfg = resolve_train_config(&a, seed)?;
    let data = read_dataset(&a.data)?;
    cfg.train.validate(data.d)?;
    let dir = a.out_dir.clone().unwrap_or_else(default_out_dir);
    fs::create_dir_all(&dir)?;
    let config_text = cfg.to_toml();
    let mut files = Outputs::new();
    files.write(&dir.join("config.toml"), config_text.as_bytes())?;

    let count = cfg.train.architecture(data.d).parameter_count();
    writeln!(out, "dictionary size (M): {}", cfg.train.dictionary_size)?;
    writeln!(out, "trainable parameters: {}", thousands(count))?;
    writeln!(out, "transition pairs (N): {}", data.n_pairs())?;
    out.flush()?;

    let every = cfg.checkpoint_every;
    let ck_path = dir.join("checkpoint.json");
    let mut ck_error = None;
    let mut observer = |r: &crate::trainer::IterationRecord, net: &crate::networks::DictionaryNetwork| {
        if let Some(k) = every {
            if (r.iteration + 1) % k == 0 {
                if let Err(e) = serde_json::to_vec(&net.to_checkpoint())
                    .map_err(CliError::from)
                    .and_then(|b| fs::write(&ck_path, b).map_err(CliError::from))
                {
                    ck_error = Some(e);
                }
            }
        }
    };
    let result = train_with_observer(&cfg.train, &data, &mut observer);
    if let Some(e) = ck_error {
        return Err(e);
    }
    let (dict, model, report) = match result {
        Ok(v) => v,
        Err(TrainError::NonFinite { iteration, losses }) => {
            let mut csv = String::from("iteration,loss\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(csv, "{i},{l:.16e}");
            }
            files.write(&dir.join("loss_trace.csv"), csv.as_bytes())?;
            return Err(CliError::Numerical(format!(
                "loss became non-finite at iteration {iteration}; trace written"
            )));
        }
        Err(e) => return Err(e.into()),
    };

    let checkpoint: Checkpoint = dict.network().expect("trained network").to_checkpoint();
    files.write(&ck_path, &serde_json::to_vec_pretty(&checkpoint)?)?;
    let model_file = ModelFile {
        system: data.system.clone(),
        model: model.to_export(),
    };
    files.write(&dir.join("model.json"), &serde_json::to_vec_pretty(&model_file)?)?;
    let mut csv = String::from("iteration,loss_before_k_update,loss\n");
    for r in &report.records {
        let before = r
            .loss_before_k_update
            .map(|v| format!("{v:.16e}"))
            .unwrap_or_default();
        let _ = writeln!(csv, "{},{before},{:.16e}", r.iteration, r.loss);
    }
    files.write(&dir.join("loss_trace.csv"), csv.as_bytes())?;
    files.write(&dir.join("report.json"), &serde_json::to_vec_pretty(&report)?)?;

    writeln!(out, "iterations: {}", report.iterations)?;
    writeln!(out, "final J: {:.6e}", report.final_loss)?;
    writeln!(
        out,
        "converged (J <= epsilon = {}): {}",
        cfg.train.epsilon, report.success
    )?;
    writeln!(out, "monotone K-update violations: {}", report.monotone_violations)?;
    writeln!(out, "wall time: {:.1} s", report.wall_time_s)?;
    writeln!(out, "wrote {}", dir.display())?;
    files.manifest(
        &dir.join("manifest.json"),
        "train",
        Some(sha256_hex(config_text.as_bytes())),
        cfg.train.seed,
        started,
    )
}

fn cmd_predict(a: PredictArgs, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let (model, system) = read_model(&a.model)?;
    let d = model.dictionary.state_dim();
    if a.ic.len() != d {
        return Err(CliError::Usage(format!(
            "--ic has {} components, the model state has {d}",
            a.ic.len()
        )));
    }
    let pred = model.predict_many(&a.ic, 1, a.steps)?.pop().unwrap();
    let actual = if a.truth {
        Some(stepper_for(&system)?.trajectory(&a.ic, a.steps)?)
    } else {
        None
    };
    let mut csv = String::from("step");
    for i in 1..=d {
        let _ = write!(csv, ",x{i}");
    }
    if actual.is_some() {
        for i in 1..=d {
            let _ = write!(csv, ",actual_x{i}");
        }
        csv.push_str(",error");
    }
    csv.push('\n');
    for n in 0..=a.steps {
        let p = &pred[n * d..(n + 1) * d];
        let _ = write!(csv, "{n}");
        for v in p {
            let _ = write!(csv, ",{v:.16e}");
        }
        if let Some(act) = &actual {
            let t = &act[n * d..(n + 1) * d];
            for v in t {
                let _ = write!(csv, ",{v:.16e}");
            }
            let err = t.iter().zip(p).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let _ = write!(csv, ",{err:.16e}");
        }
        csv.push('\n');
    }
    match a.out {
        Some(path) => {
            ensure_parent(&path)?;
            fs::write(&path, csv)?;
            writeln!(out, "wrote {}", path.display())?;
        }
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, seed: Option<u64>, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let started = unix_now();
    let seed = seed.unwrap_or(0);
    let (model, system) = read_model(&a.model)?;
    let d = model.dictionary.state_dim();
    let truth = stepper_for(&system)?;
    let mut rows: Vec<(String, f64, usize)> = Vec::new();
    if matches!(a.which, Which::Recon | Which::Both) {
        match system {
            SystemDescriptor::Duffing { .. } => {
                let p = duffing_params(&system)?;
                let by_basin = duffing_reconstruction_by_basin(
                    &model,
                    &p,
                    &EvalConfig::duffing().region,
                    a.trajectories,
                    a.steps,
                    seed,
                )?;
                for b in by_basin {
                    let tag = if b.basin > 0 { "plus" } else { "minus" };
                    rows.push((format!("e_recon_basin_{tag}"), b.mean_error, b.trajectories));
                }
            }
            _ => {
                let ics = sample_box(&EvalConfig::ks(d).region, a.trajectories, seed, 100);
                let errs = reconstruction_errors(&model, truth.as_ref(), &ics, a.steps)?;
                let mean = errs.iter().sum::<f64>() / errs.len() as f64;
                rows.push(("e_recon".into(), mean, errs.len()));
            }
        }
    }
    if matches!(a.which, Which::Eigen | Which::Both) {
        let mut cfg = match system {
            SystemDescriptor::Duffing { .. } => EvalConfig::duffing(),
            _ => EvalConfig::ks(d),
        };
        cfg.samples = a.samples;
        cfg.seed = seed;
        let e = evaluate_eigen(&model, truth.as_ref(), &cfg)?;
        rows.push(("e_eigen".into(), e.mean, e.samples));
    }
    let mut csv = String::from("metric,value,samples,seed\n");
    for (name, v, n) in &rows {
        let _ = writeln!(csv, "{name},{v:.16e},{n},{seed}");
        writeln!(out, "{name}: {v:.6e} ({n} samples)")?;
    }
    let path = a.out.unwrap_or_else(|| default_out_dir().join("metrics.csv"));
    let mut files = Outputs::new();
    files.write(&path, csv.as_bytes())?;
    writeln!(out, "wrote {}", path.display())?;
    files.manifest(&path.with_extension("manifest.json"), "eval", None, seed, started)
}

fn cmd_classify(a: ClassifyArgs, seed: Option<u64>, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let started = unix_now();
    let seed = seed.unwrap_or(0);
    let (model, system) = read_model(&a.model)?;
    let p = duffing_params(&system)?;
    if a.samples == 0 {
        return Err(CliError::Usage("--samples must be positive".into()));
    }
    let ics = sample_box(&EvalConfig::duffing().region, a.samples, seed, 200);
    let c = classify_basins(&model, &ics, &p, a.horizon)?;
    let mut csv = String::from("x1,x2,truth,predicted\n");
    for ((ic, t), pr) in c.initial_conditions.iter().zip(&c.truth).zip(&c.predicted) {
        let _ = writeln!(csv, "{:.16e},{:.16e},{t},{pr}", ic[0], ic[1]);
    }
    let path = a.out.unwrap_or_else(|| default_out_dir().join("classification.csv"));
    let mut files = Outputs::new();
    files.write(&path, csv.as_bytes())?;
    writeln!(out, "samples: {}", a.samples)?;
    writeln!(out, "accuracy: {:.4}", c.accuracy)?;
    writeln!(out, "wrote {}", path.display())?;
    files.manifest(&path.with_extension("manifest.json"), "classify", None, seed, started)
}

fn cmd_sweep(a: SweepArgs, seed: Option<u64>, out: &mut (dyn std::io::Write + Send)) -> Result<(), CliError> {
    let started = unix_now();
    let base = match &a.config {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(p)?)?.train,
        None => TrainConfig::default(),
    };
    let seed = seed.unwrap_or(base.seed);
    let data = read_dataset(&a.data)?;
    let mut configs = Vec::new();
    for &fw in &a.field_widths {
        let width = match base.dictionary {
            DictionaryKind::Node { width, .. } => width,
            _ => 120,
        };
        configs.push((
            format!("node l'={width} l''={fw}"),
            TrainConfig {
                dictionary: DictionaryKind::Node {
                    width,
                    field_width: fw,
                    time_span: [0.0, 1.0],
                },
                seed,
                ..base.clone()
            },
        ));
    }
    for &w in &a.mlp_widths {
        let depth = match base.dictionary {
            DictionaryKind::Mlp { depth, .. } => depth,
            _ => 3,
        };
        configs.push((
            format!("mlp l={w} depth={depth}"),
            TrainConfig {
                dictionary: DictionaryKind::Mlp { width: w, depth },
                seed,
                ..base.clone()
            },
        ));
    }
    if configs.is_empty() {
        return Err(CliError::Usage(
            "give --field-widths and/or --mlp-widths".into(),
        ));
    }
    let truth = stepper_for(&data.system)?;
    let system = data.system.clone();
    let d = data.d;
    let metric = a.metric;
    let eval = move |model: &KoopmanModel| -> Result<f64, MetricsError> {
        match metric {
            SweepMetric::Classify => {
                let p = match system {
                    SystemDescriptor::Duffing { alpha, beta, gamma, dt } => DuffingParams {
                        alpha,
                        beta,
                        gamma,
                        dt,
                        ..DuffingParams::default()
                    },
                    _ => {
                        return Err(MetricsError::Invalid(
                            "classification needs Duffing data".into(),
                        ))
                    }
                };
                let ics = sample_box(&EvalConfig::duffing().region, 2000, seed, 200);
                Ok(classify_basins(model, &ics, &p, 49)?.accuracy)
            }
            SweepMetric::Recon => {
                let region = if d == 2 {
                    EvalConfig::duffing().region
                } else {
                    EvalConfig::ks(d).region
                };
                let ics = sample_box(&region, 50, seed, 100);
                let errs = reconstruction_errors(model, truth.as_ref(), &ics, 50)?;
                Ok(errs.iter().sum::<f64>() / errs.len() as f64)
            }
            SweepMetric::Eigen => {
                let cfg = EvalConfig {
                    seed,
                    ..if d == 2 {
                        EvalConfig::duffing()
                    } else {
                        EvalConfig::ks(d)
                    }
                };
                Ok(evaluate_eigen(model, truth.as_ref(), &cfg)?.mean)
            }
        }
    };
    let rows = efficiency_sweep(&configs, &data, &eval)?;
    let mut csv = String::from("label,parameter_count,metric,final_loss\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.16e},{:.16e}", r.label, r.parameter_count, r.metric, r.final_loss);
        writeln!(out, "{:<28} params {:>9}  metric {:.6e}", r.label, thousands(r.parameter_count), r.metric)?;
    }
    let higher = matches!(metric, SweepMetric::Classify);
    match minimum_parameters(&rows, a.target, higher) {
        Some(n) => writeln!(out, "minimum parameters reaching target {}: {}", a.target, thousands(n))?,
        None => writeln!(out, "no architecture reached target {}", a.target)?,
    }
    let path = a.out.unwrap_or_else(|| default_out_dir().join("sweep.csv"));
    let mut files = Outputs::new();
    files.write(&path, csv.as_bytes())?;
    writeln!(out, "wrote {}", path.display())?;
    files.manifest(&path.with_extension("manifest.json"), "sweep", None, seed, started)
}
