//! `natgrad` command line: train, evaluate, damping-sweep, toy and selftest.
//!
//! Exit codes: 0 ok, 1 runtime or selftest failure, 2 config, 3 divergence
//! (partial outputs kept), 4 missing artifact.

pub mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{self, DataError};
use crate::evaluation::{self, SweepGrid};
use crate::experiments::{self, CheckpointGammas};
use crate::models::{Batch, ModelSpec, ParameterVector};
use crate::optim::{self, Checkpoint, Optimiser, ScheduleSpec, TrainConfig, TrainError, TrainRun};
use crate::selftest;
use crate::toyviz::{self, FieldMethod, Toy};
use crate::updates::{Method, UpdateRequest};

use config::{DatasetSpec, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

/// Env var read when `--threads` is absent.
pub const THREADS_ENV: &str = "NATGRAD_THREADS";

#[derive(Debug, Parser)]
#[command(name = "natgrad", version, about = "Exact natural-gradient preconditioners and their gamma-indicator evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured optimiser and seed, writing metrics and checkpoints.
    Train(CommonArgs),
    /// Gamma indicators of each method at every checkpoint of a run.
    Evaluate(CommonArgs),
    /// Gamma ratio against damping on the first, middle and last checkpoints.
    DampingSweep(CommonArgs),
    /// Vector fields and trajectories of the two-parameter toys.
    Toy(CommonArgs),
    /// Run the invariant suite and print a pass/fail table.
    Selftest(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML config (optional for selftest)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `out` from the config
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run this single seed instead of the configured `seeds`
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: NATGRAD_THREADS, then all cores)
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Missing(_) => EXIT_MISSING,
            CliError::Failed(_) => EXIT_FAILURE,
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Failed(e.to_string())
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

/// Parses `std::env::args`, runs the command and returns its exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("natgrad: {e}");
            e.code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::DampingSweep(a) => ("damping-sweep", a),
        Command::Toy(a) => ("toy", a),
        Command::Selftest(a) => ("selftest", a),
    };
    configure_threads(args.threads)?;
    let inv = Invocation::load(name, args)?;
    match cli.command {
        Command::Train(_) => cmd_train(&inv),
        Command::Evaluate(_) => cmd_evaluate(&inv),
        Command::DampingSweep(_) => cmd_damping_sweep(&inv),
        Command::Toy(_) => cmd_toy(&inv),
        Command::Selftest(_) => cmd_selftest(&inv),
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), CliError> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| CliError::Config(format!("{THREADS_ENV}={v:?} is not a count")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("thread count must be at least 1".into()));
        }
        // a pool that already exists (repeated calls in one process) is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// A validated command line: settings plus what goes into the manifest.
pub struct Invocation {
    pub command: &'static str,
    pub config_text: String,
    pub seed_override: Option<u64>,
    pub settings: Settings,
}

impl Invocation {
    fn load(command: &'static str, args: &CommonArgs) -> Result<Self, CliError> {
        let (config_text, base) = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                (text, path.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None if command == "selftest" => (String::new(), PathBuf::new()),
            None => return Err(CliError::Config("--config <path> is required".into())),
        };
        let raw = config::parse(&config_text).map_err(|e| CliError::Config(e.0))?;
        let mut settings = raw.validate(&base).map_err(|e| CliError::Config(e.0))?;
        if let Some(seed) = args.seed {
            settings.seeds = vec![seed];
        }
        if let Some(out) = &args.out {
            settings.out = Some(out.clone());
        }
        Ok(Self { command, config_text, seed_override: args.seed, settings })
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.settings
            .out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (set `out` or pass --out)".into()))
    }

    /// SHA-256 over the code version, command, verbatim config and seed override.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for part in [env!("CARGO_PKG_VERSION"), self.command, &self.config_text] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        match self.seed_override {
            Some(s) => h.update([&[1u8][..], &s.to_le_bytes()].concat()),
            None => h.update([0u8]),
        }
        hex::encode(h.finalize())
    }

    fn write_manifest(&self, dir: &Path) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            version: &'a str,
            command: &'a str,
            config: &'a str,
            seed_override: Option<u64>,
            hash: String,
        }
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config: &self.config_text,
            seed_override: self.seed_override,
            hash: self.hash(),
        };
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &manifest).map_err(failed)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

// ---------------------------------------------------------------------------
// datasets and models

fn load_dataset(spec: &DatasetSpec) -> Result<Batch, CliError> {
    let result = match spec {
        DatasetSpec::Synthetic(m) => data::synthetic_mixture(m),
        DatasetSpec::Csv { path, classes } => data::load_csv(path, *classes),
        DatasetSpec::Idx { images, labels, classes } => data::load_idx(images, labels, *classes),
        DatasetSpec::Toy(toy) => Ok(toy.batch()),
    };
    result.map_err(|e| match e {
        DataError::Io(io) if io.kind() == io::ErrorKind::NotFound => CliError::Missing(format!("dataset file: {io}")),
        other => CliError::Config(format!("dataset: {other}")),
    })
}

fn model_for(settings: &Settings, data: &Batch) -> Result<ModelSpec, CliError> {
    match &settings.dataset {
        DatasetSpec::Toy(toy) => Ok(toy.spec()),
        DatasetSpec::Synthetic(m) => mlp(data.inputs.ncols(), &settings.hidden, m.classes),
        DatasetSpec::Csv { classes, .. } | DatasetSpec::Idx { classes, .. } => {
            mlp(data.inputs.ncols(), &settings.hidden, *classes)
        }
    }
}

fn mlp(dim: usize, hidden: &[usize], classes: usize) -> Result<ModelSpec, CliError> {
    let mut widths = vec![dim];
    widths.extend(hidden);
    widths.push(classes);
    ModelSpec::mlp(widths).map_err(|e| CliError::Config(e.to_string()))
}

/// Dataset and model, with batch-size checks that need the sample count.
fn prepare(settings: &Settings, batch_sizes: &[(&str, usize)]) -> Result<(Batch, ModelSpec), CliError> {
    let data = load_dataset(&settings.dataset)?;
    for &(name, size) in batch_sizes {
        if size > data.len() {
            return Err(CliError::Config(format!("`{name}` = {size} exceeds the {} samples in the dataset", data.len())));
        }
    }
    let spec = model_for(settings, &data)?;
    Ok((data, spec))
}

// ---------------------------------------------------------------------------
// train

fn train_config(settings: &Settings, optimiser: Optimiser, n: usize, seed: u64) -> TrainConfig {
    let mut config = TrainConfig::with_defaults(
        optimiser,
        settings.rates.get(optimiser),
        settings.epochs,
        settings.batch_size,
        n,
        seed,
    );
    if let Some(kind) = &settings.schedule {
        config.schedule = ScheduleSpec { kind: kind.clone(), ..config.schedule };
    }
    config.damping = settings.damping;
    config
}

fn write_run(dir: &Path, spec: &ModelSpec, run: &TrainRun) -> Result<(), CliError> {
    let mut metrics = create(&dir.join("metrics.csv"))?;
    optim::write_metrics_csv(&mut metrics, &run.records)?;
    let mut epochs = csv::Writer::from_writer(create(&dir.join("epochs.csv"))?);
    epochs.write_record(["epoch", "train_loss"]).map_err(failed)?;
    for c in &run.checkpoints {
        epochs.write_record([c.epoch.to_string(), format!("{:e}", c.train_loss)]).map_err(failed)?;
        let mut f = create(&dir.join("checkpoints").join(format!("{}.ckpt", c.id())))?;
        optim::write_checkpoint(&mut f, spec, &c.theta)?;
    }
    epochs.flush()?;
    Ok(())
}

fn cmd_train(inv: &Invocation) -> Result<(), CliError> {
    let s = &inv.settings;
    let out = inv.out_dir()?;
    let (data, spec) = prepare(s, &[("batch_size", s.batch_size)])?;
    let inits = s
        .seeds
        .iter()
        .map(|&seed| match &s.init {
            Some(v) => ParameterVector::from_vec(&spec, v.clone()).map_err(|e| CliError::Config(format!("`init`: {e}"))),
            None => Ok(ParameterVector::init(&spec, seed)),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if s.optimisers.contains(&Optimiser::Sf) && !spec.kind().is_classification() {
        return Err(CliError::Config("optimiser sf needs a classification dataset".into()));
    }
    inv.write_manifest(out)?;
    if s.epochs == 0 {
        return Ok(());
    }
    let mut diverged = Vec::new();
    for &optimiser in &s.optimisers {
        for (&seed, init) in s.seeds.iter().zip(&inits) {
            let dir = out.join(format!("{optimiser}-seed{seed}"));
            let config = train_config(s, optimiser, data.len(), seed);
            match optim::train(&spec, &data, init, &config) {
                Ok(run) => write_run(&dir, &spec, &run)?,
                Err(TrainError::Diverged { step, loss, run }) => {
                    write_run(&dir, &spec, &run)?;
                    diverged.push(format!("{optimiser} seed {seed} at step {step} (loss {loss:e})"));
                }
                Err(TrainError::Update { step, source, run }) => {
                    write_run(&dir, &spec, &run)?;
                    return Err(CliError::Failed(format!("{optimiser} seed {seed}: update failed at step {step}: {source}")));
                }
                Err(e) => return Err(CliError::Config(e.to_string())),
            }
        }
    }
    if diverged.is_empty() { Ok(()) } else { Err(CliError::Diverged(diverged.join("; "))) }
}

// ---------------------------------------------------------------------------
// evaluate and damping-sweep

/// `epoch-NNN.ckpt` files from `dir` (or `dir/checkpoints`), in epoch order.
fn load_checkpoints(settings: &Settings, spec: &ModelSpec, data: &Batch) -> Result<Vec<Checkpoint>, CliError> {
    let dir = settings
        .checkpoint_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("`checkpoint_dir` is required".into()))?;
    let dir = if dir.join("checkpoints").is_dir() { dir.join("checkpoints") } else { dir.to_path_buf() };
    let entries = fs::read_dir(&dir).map_err(|e| CliError::Missing(format!("{}: {e}", dir.display())))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            found.push((epoch, path));
        }
    }
    if found.is_empty() {
        return Err(CliError::Missing(format!("no checkpoints in {}", dir.display())));
    }
    found.sort();
    found
        .into_iter()
        .map(|(epoch, path)| {
            let file = File::open(&path)?;
            let theta = optim::read_checkpoint(io::BufReader::new(file), spec)
                .map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
            let train_loss = crate::models::total_loss(spec, &theta, data).map_err(failed)? / data.len() as f64;
            Ok(Checkpoint { epoch, theta, train_loss })
        })
        .collect()
}

fn requests(settings: &Settings) -> Vec<UpdateRequest> {
    let seed = settings.seeds[0];
    settings
        .methods
        .iter()
        .map(|&m| {
            let r = UpdateRequest::new(m, settings.damping).with_seed(seed);
            match settings.cg_iters {
                Some(k) if m == Method::NgdCg => r.with_cg_iters(k),
                _ => r,
            }
        })
        .collect()
}

fn cmd_evaluate(inv: &Invocation) -> Result<(), CliError> {
    let s = &inv.settings;
    let out = inv.out_dir()?;
    let (data, spec) = prepare(s, &[("eval_batch_size", s.eval_batch_size)])?;
    let checkpoints = load_checkpoints(s, &spec, &data)?;
    inv.write_manifest(out)?;
    let batches = experiments::evaluation_batches(&data, s.eval_batches, s.eval_batch_size, s.eval_seed);
    let requests = requests(s);
    let mut cells = Vec::new();
    let mut summary = Vec::new();
    for c in &checkpoints {
        let eval = evaluation::evaluate_methods(&spec, &c.theta, &batches, &requests).map_err(failed)?;
        cells.extend(eval.reports.iter().map(|r| (c.id(), r.clone())));
        summary.push(CheckpointGammas::summarize(c.id(), c.epoch, eval));
    }
    evaluation::write_reports_csv(create(&out.join("gammas.csv"))?, &cells).map_err(failed)?;
    experiments::write_gamma_summary_csv(create(&out.join("summary.csv"))?, &summary).map_err(failed)?;
    Ok(())
}

fn cmd_damping_sweep(inv: &Invocation) -> Result<(), CliError> {
    let s = &inv.settings;
    let out = inv.out_dir()?;
    let (data, spec) = prepare(s, &[("eval_batch_size", s.eval_batch_size)])?;
    let checkpoints = load_checkpoints(s, &spec, &data)?;
    let (lo, hi, points) = s.sweep;
    let mut grid = SweepGrid::log_spaced(lo, hi, points).map_err(|e| CliError::Config(e.to_string()))?;
    grid.trace_relative = matches!(s.damping, crate::updates::Damping::TraceRelative(_));
    let methods: Vec<Method> = s.methods.iter().copied().filter(|&m| m != Method::Sgd).collect();
    inv.write_manifest(out)?;
    let batches = experiments::evaluation_batches(&data, s.eval_batches, s.eval_batch_size, s.eval_seed);
    let mut rows = Vec::new();
    for c in experiments::sweep_checkpoints(&checkpoints) {
        rows.extend(
            evaluation::damping_sweep(&spec, &c.theta, &batches, &grid, &methods, &c.id(), s.seeds[0]).map_err(failed)?,
        );
    }
    evaluation::write_sweep_csv(create(&out.join("sweep.csv"))?, &rows).map_err(failed)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// toy and selftest

fn cmd_toy(inv: &Invocation) -> Result<(), CliError> {
    let s = &inv.settings;
    let out = inv.out_dir()?;
    inv.write_manifest(out)?;
    for toy in [Toy::LeastSquares, Toy::Logistic] {
        let field = toyviz::toy_field(toy, &s.grid);
        toyviz::write_field_csv(create(&out.join(format!("{}_field.csv", toy.name())))?, &field).map_err(failed)?;
        let trajectories: Vec<_> = FieldMethod::ALL
            .iter()
            .flat_map(|&m| toyviz::trace_trajectories(toy, m, &toyviz::default_starts(), s.step_norm, s.max_steps))
            .collect();
        toyviz::write_trajectories_csv(create(&out.join(format!("{}_trajectories.csv", toy.name())))?, &trajectories)
            .map_err(failed)?;
    }
    Ok(())
}

fn cmd_selftest(inv: &Invocation) -> Result<(), CliError> {
    let known: Vec<&str> = selftest::checks().iter().map(|c| c.id).collect();
    let ids: Vec<&str> = inv.settings.checks.iter().map(String::as_str).collect();
    if let Some(bad) = ids.iter().find(|id| !known.contains(id)) {
        return Err(CliError::Config(format!("unknown check `{bad}` (known: {})", known.join(", "))));
    }
    let outcomes = selftest::run_all(&ids, inv.settings.seeds[0]);
    let mut stdout = io::stdout().lock();
    for o in &outcomes {
        writeln!(stdout, "{o}")?;
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.id).collect();
    writeln!(stdout, "{} of {} checks passed", outcomes.len() - failed.len(), outcomes.len())?;
    if failed.is_empty() { Ok(()) } else { Err(CliError::Failed(format!("failed checks: {}", failed.join(", ")))) }
}
