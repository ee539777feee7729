//! Stochastic training with the exact preconditioners, plus continuous-time
//! checks of the iEF flow.
//!
//! A run is strictly sequential. Randomness comes from independent ChaCha
//! streams of one seed: stream 1 shuffles the data each epoch, stream 2
//! draws the label-sampling seeds of the SF method.

use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{self, DenseVector, LinalgError};
use crate::models::{self, Batch, BatchLinearization, ModelError, ModelKind, ModelSpec, ParameterVector};
use crate::updates::{self, Damping, UpdateError, UpdateVector};

/// A batch loss above this (or a non-finite one) halts the run.
pub const DIVERGENCE_LOSS: f64 = 1e6;

/// The flow checks abort when `cond(JJᵀ)` exceeds this.
pub const MAX_GRAM_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Optimiser {
    Sgd,
    Ef,
    Ief,
    Sf,
    Adam,
}

impl Optimiser {
    pub const ALL: [Optimiser; 5] = [Optimiser::Sgd, Optimiser::Ef, Optimiser::Ief, Optimiser::Sf, Optimiser::Adam];

    pub fn as_str(self) -> &'static str {
        match self {
            Optimiser::Sgd => "sgd",
            Optimiser::Ef => "ef",
            Optimiser::Ief => "ief",
            Optimiser::Sf => "sf",
            Optimiser::Adam => "adam",
        }
    }

    /// Constant for sgd/ief/adam, normalised linear decay for ef/sf.
    pub fn default_schedule(self, eta0: f64, total_steps: usize) -> ScheduleSpec {
        let kind = match self {
            Optimiser::Ef | Optimiser::Sf => ScheduleKind::NormalizedLinearDecay,
            _ => ScheduleKind::Constant,
        };
        ScheduleSpec { kind, eta0, total_steps }
    }
}

impl fmt::Display for Optimiser {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Optimiser {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam-baseline" => Ok(Optimiser::Adam),
            _ => Optimiser::ALL
                .into_iter()
                .find(|o| o.as_str() == s)
                .ok_or_else(|| TrainError::InvalidConfig(format!("unknown optimiser `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleKind {
    Constant,
    /// Each raw update is scaled to unit norm, then by `η₀(1 − t/T)`.
    NormalizedLinearDecay,
    /// `η₀·factor^k` after the `k`-th milestone step.
    MultiStep { milestones: Vec<usize>, factor: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn constant(eta0: f64, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::Constant, eta0, total_steps }
    }

    pub fn normalized_linear_decay(eta0: f64, total_steps: usize) -> Self {
        Self { kind: ScheduleKind::NormalizedLinearDecay, eta0, total_steps }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning rate must be finite and >= 0, got {}", self.eta0)));
        }
        if let ScheduleKind::MultiStep { factor, .. } = &self.kind {
            if !(*factor > 0.0) {
                return Err(TrainError::InvalidConfig("multistep factor must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Learning rate at step `t` (0-based).
    pub fn eta(&self, t: usize) -> f64 {
        match &self.kind {
            ScheduleKind::Constant => self.eta0,
            ScheduleKind::NormalizedLinearDecay => {
                let total = self.total_steps.max(1) as f64;
                self.eta0 * (1.0 - t as f64 / total).max(0.0)
            }
            ScheduleKind::MultiStep { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| t >= m).count();
                self.eta0 * factor.powi(passed as i32)
            }
        }
    }

    /// Multiplier turning a raw direction into the applied step at `t`.
    pub fn step_scale(&self, t: usize, direction_norm: f64) -> f64 {
        let eta = self.eta(t);
        match self.kind {
            ScheduleKind::NormalizedLinearDecay if direction_norm > 0.0 => eta / direction_norm,
            ScheduleKind::NormalizedLinearDecay => 0.0,
            _ => eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimiser: Optimiser,
    pub schedule: ScheduleSpec,
    pub damping: Damping,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
    /// Record the EF/iEF per-sample reduction law residual at each step.
    pub record_law_residual: bool,
}

impl TrainConfig {
    /// Steps per epoch for `n` samples, keeping the last short batch.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    /// Config with the method's default schedule spanning the whole run.
    pub fn with_defaults(optimiser: Optimiser, eta0: f64, epochs: usize, batch_size: usize, n: usize, seed: u64) -> Self {
        let total = epochs * n.div_ceil(batch_size.max(1));
        Self {
            optimiser,
            schedule: optimiser.default_schedule(eta0, total),
            damping: Damping::default(),
            epochs,
            batch_size,
            seed,
            adam: AdamParams::default(),
            record_law_residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    /// Every per-sample gradient vanished; no step was taken.
    Skipped,
    Diverged,
}

impl StepStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StepStatus::Ok => "ok",
            StepStatus::Skipped => "skipped",
            StepStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean per-sample loss of the batch before the step.
    pub loss: f64,
    /// Norm of the applied step `θ_t − θ_{t+1}`.
    pub update_norm: f64,
    pub eta: f64,
    pub status: StepStatus,
    pub law_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs; 0 is the initial point.
    pub epoch: usize,
    pub theta: ParameterVector,
    /// Mean per-sample loss over the whole training set.
    pub train_loss: f64,
}

impl Checkpoint {
    pub fn id(&self) -> String {
        format!("epoch-{:03}", self.epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub theta: ParameterVector,
}

impl TrainRun {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.train_loss)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64, run: Box<TrainRun> },
    #[error("update failed at step {step}: {source}")]
    Update { step: usize, source: UpdateError, run: Box<TrainRun> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

struct AdamState {
    m: DenseVector,
    v: DenseVector,
    t: i32,
}

impl AdamState {
    fn direction(&mut self, g: &DenseVector, p: &AdamParams) -> DenseVector {
        self.t += 1;
        self.m = &self.m * p.beta1 + g * (1.0 - p.beta1);
        self.v = &self.v * p.beta2 + g.component_mul(g) * (1.0 - p.beta2);
        let c1 = 1.0 - p.beta1.powi(self.t);
        let c2 = 1.0 - p.beta2.powi(self.t);
        self.m.zip_map(&self.v, |m, v| (m / c1) / ((v / c2).sqrt() + p.eps))
    }
}

/// Largest deviation from the EF (`J·Δ = 1`) or iEF (`J·Δ = s`) reduction law
/// over the rows kept by the solve, relative to the target scale.
pub fn reduction_law_residual(lin: &BatchLinearization, update: &UpdateVector) -> Option<f64> {
    let reductions = &lin.jacobian * &update.direction;
    let kept = (0..lin.num_samples()).filter(|n| !update.dropped_rows.contains(n));
    match update.method {
        updates::Method::Ef => kept.map(|n| (reductions[n] - 1.0).abs()).reduce(f64::max),
        updates::Method::Ief => {
            let smax = lin.sief.amax();
            kept.map(|n| (reductions[n] - lin.sief[n]).abs() / smax).reduce(f64::max)
        }
        _ => None,
    }
}

fn dataset_loss(spec: &ModelSpec, theta: &ParameterVector, data: &Batch) -> Result<f64, ModelError> {
    Ok(models::total_loss(spec, theta, data)? / data.len() as f64)
}

/// Trains from `init` on `data`; checkpoints at epoch 0 and after every epoch.
pub fn train(spec: &ModelSpec, data: &Batch, init: &ParameterVector, config: &TrainConfig) -> Result<TrainRun, TrainError> {
    if config.batch_size == 0 || config.batch_size > data.len() {
        return Err(TrainError::InvalidConfig(format!(
            "batch size must be in [1, {}], got {}",
            data.len(),
            config.batch_size
        )));
    }
    config.schedule.validate()?;
    if config.optimiser == Optimiser::Sf && !spec.kind().is_classification() {
        return Err(TrainError::InvalidConfig("sf needs a classification model".into()));
    }
    models::check_shapes(spec, init, &data.select(&[0]))?;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(2);

    let mut run = TrainRun {
        config: config.clone(),
        records: Vec::new(),
        checkpoints: vec![Checkpoint { epoch: 0, theta: init.clone(), train_loss: dataset_loss(spec, init, data)? }],
        theta: init.clone(),
    };
    let mut adam = AdamState { m: DenseVector::zeros(init.len()), v: DenseVector::zeros(init.len()), t: 0 };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk);
            let lin = models::batch_linearize(spec, &run.theta, &batch)?;
            let loss = lin.total_loss() / batch.len() as f64;
            let eta = config.schedule.eta(step);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                run.records.push(StepRecord {
                    step,
                    epoch,
                    loss,
                    update_norm: 0.0,
                    eta,
                    status: StepStatus::Diverged,
                    law_residual: None,
                });
                return Err(TrainError::Diverged { step, loss, run: Box::new(run) });
            }
            let lambda = config.damping.resolve(&lin);
            let sf_seed: u64 = sample_rng.random();
            let update = match config.optimiser {
                Optimiser::Sgd => Ok(updates::sgd_update(&lin)),
                Optimiser::Ef => updates::ef_update(&lin, lambda),
                Optimiser::Ief => updates::ief_update(&lin, lambda),
                Optimiser::Sf => models::sample_pseudo_gradients(spec, &run.theta, &batch, sf_seed)
                    .map_err(UpdateError::from)
                    .and_then(|(_, jhat)| updates::sf_update(&lin, &jhat, lambda)),
                Optimiser::Adam => Ok(UpdateVector {
                    method: updates::Method::Sgd,
                    direction: adam.direction(&lin.total_grad, &config.adam),
                    lambda: 0.0,
                    dropped_rows: Vec::new(),
                }),
            };
            let (direction, status, law_residual) = match update {
                Ok(u) => {
                    let residual = if config.record_law_residual { reduction_law_residual(&lin, &u) } else { None };
                    (u.direction, StepStatus::Ok, residual)
                }
                Err(UpdateError::NoUsableRows) => (DenseVector::zeros(init.len()), StepStatus::Skipped, None),
                Err(source) => return Err(TrainError::Update { step, source, run: Box::new(run) }),
            };
            let scale = config.schedule.step_scale(step, direction.norm());
            let applied = direction * scale;
            let next = run.theta.as_vector() - &applied;
            if next.iter().any(|v| !v.is_finite()) {
                run.records.push(StepRecord {
                    step,
                    epoch,
                    loss,
                    update_norm: f64::NAN,
                    eta,
                    status: StepStatus::Diverged,
                    law_residual,
                });
                return Err(TrainError::Diverged { step, loss: f64::NAN, run: Box::new(run) });
            }
            run.theta = ParameterVector::from_vector_unchecked(next);
            run.records.push(StepRecord { step, epoch, loss, update_norm: applied.norm(), eta, status, law_residual });
            step += 1;
        }
        let train_loss = dataset_loss(spec, &run.theta, data)?;
        run.checkpoints.push(Checkpoint { epoch, theta: run.theta.clone(), train_loss });
        if !train_loss.is_finite() || train_loss > DIVERGENCE_LOSS {
            return Err(TrainError::Diverged { step, loss: train_loss, run: Box::new(run) });
        }
    }
    Ok(run)
}

/// Metrics CSV: `step,epoch,loss,update_norm,eta,status`.
pub fn write_metrics_csv<W: Write>(out: W, records: &[StepRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "epoch", "loss", "update_norm", "eta", "status"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.loss),
            format!("{:e}", r.update_norm),
            format!("{:e}", r.eta),
            r.status.as_str().to_string(),
        ])?;
    }
    w.flush()
}

// ---------------------------------------------------------------------------
// checkpoint files

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint holds {got} parameters, model expects {expected}")]
    ParamMismatch { expected: u64, got: u64 },
    #[error("checkpoint was written for a different model spec")]
    SpecMismatch,
    #[error("checkpoint contains non-finite values")]
    NonFinite,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Header (magic, version, P, spec hash) followed by little-endian `f64`s.
pub fn write_checkpoint<W: Write>(mut out: W, spec: &ModelSpec, theta: &ParameterVector) -> io::Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(theta.len() as u64).to_le_bytes())?;
    out.write_all(&spec.hash64().to_le_bytes())?;
    for v in theta.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_checkpoint<R: Read>(mut input: R, spec: &ModelSpec) -> Result<ParameterVector, CheckpointError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let mut long = [0u8; 8];
    input.read_exact(&mut long)?;
    let p = u64::from_le_bytes(long);
    if p != spec.num_params() as u64 {
        return Err(CheckpointError::ParamMismatch { expected: spec.num_params() as u64, got: p });
    }
    input.read_exact(&mut long)?;
    if u64::from_le_bytes(long) != spec.hash64() {
        return Err(CheckpointError::SpecMismatch);
    }
    let mut values = Vec::with_capacity(p as usize);
    for _ in 0..p {
        input.read_exact(&mut long)?;
        values.push(f64::from_le_bytes(long));
    }
    ParameterVector::from_vec(spec, values).map_err(|_| CheckpointError::NonFinite)
}

// ---------------------------------------------------------------------------
// continuous-time flow checks

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("Gram matrix condition {condition:e} exceeds {MAX_GRAM_CONDITION:e} at t = {t}")]
    RankDeficiency { t: f64, condition: f64, partial: Box<BoundReport> },
    #[error("flow check needs {0}")]
    WrongKind(&'static str),
    #[error("invalid flow settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Outcome of integrating the undamped full-batch iEF flow.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BoundReport {
    /// Smallest `bound-side − loss-side` margin over all checked `(t, n)`; ≥ 0 means the bound held.
    pub min_margin: f64,
    pub worst_time: f64,
    pub worst_sample: usize,
    /// Largest `|dl_n/dt + s_n|`, with `dl_n/dt` by central differences.
    pub max_loss_law_residual: f64,
    /// Largest Gram condition number seen.
    pub max_condition: f64,
    pub steps: usize,
    pub final_time: f64,
    /// Per-sample constants `C₀` (probability check only).
    pub c0: Vec<f64>,
}

/// `dθ/dt = −Jᵀ(JJᵀ)⁻¹s` with vanishing rows dropped; also returns `cond(JJᵀ)`.
fn ief_velocity(
    spec: &ModelSpec,
    theta: &DenseVector,
    batch: &Batch,
) -> Result<(DenseVector, BatchLinearization, f64), FlowError> {
    let params = ParameterVector::from_vector_unchecked(theta.clone());
    let lin = models::batch_linearize(spec, &params, batch)?;
    let (kept, _) = updates::split_degenerate_rows(&lin.jacobian);
    if kept.is_empty() {
        return Ok((DenseVector::zeros(theta.len()), lin, 1.0));
    }
    let j = linalg::DenseMatrix::from_fn(kept.len(), lin.num_params(), |i, c| lin.jacobian[(kept[i], c)]);
    let s = DenseVector::from_iterator(kept.len(), kept.iter().map(|&n| lin.sief[n]));
    let gram = linalg::gram(&j);
    let condition = linalg::spd_condition(&gram);
    if condition > MAX_GRAM_CONDITION {
        return Ok((DenseVector::zeros(0), lin, condition));
    }
    let coeffs = linalg::solve_spd(&gram, &s, 0.0)?;
    Ok((-(j.transpose() * coeffs), lin, condition))
}

struct FlowPoint {
    t: f64,
    losses: DenseVector,
    sief: DenseVector,
}

/// RK4 on the iEF flow; calls `observe` at every grid point (including t = 0).
fn integrate_ief_flow(
    spec: &ModelSpec,
    theta0: &ParameterVector,
    batch: &Batch,
    horizon: f64,
    dt: f64,
    report: &mut BoundReport,
) -> Result<Vec<FlowPoint>, FlowError> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(FlowError::InvalidSettings(format!("dt = {dt}, horizon = {horizon}")));
    }
    let steps = (horizon / dt).round() as usize;
    let mut theta = theta0.as_vector().clone();
    let mut points = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (k1, lin, cond) = ief_velocity(spec, &theta, batch)?;
        report.max_condition = report.max_condition.max(cond);
        points.push(FlowPoint { t, losses: lin.losses.clone(), sief: lin.sief.clone() });
        report.steps = k;
        report.final_time = t;
        if cond > MAX_GRAM_CONDITION {
            return Err(FlowError::RankDeficiency { t, condition: cond, partial: Box::new(report.clone()) });
        }
        if k == steps {
            break;
        }
        let mut stage = |offset: &DenseVector, h: f64| -> Result<DenseVector, FlowError> {
            let (v, _, c) = ief_velocity(spec, &(&theta + offset * h), batch)?;
            report.max_condition = report.max_condition.max(c);
            if c > MAX_GRAM_CONDITION {
                return Err(FlowError::RankDeficiency { t, condition: c, partial: Box::new(report.clone()) });
            }
            Ok(v)
        };
        let k2 = stage(&k1, dt / 2.0)?;
        let k3 = stage(&k2, dt / 2.0)?;
        let k4 = stage(&k3, dt)?;
        theta += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }
    Ok(points)
}

fn loss_law_residual(points: &[FlowPoint], dt: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for w in points.windows(3) {
        let dl = (&w[2].losses - &w[0].losses) / (2.0 * dt);
        for n in 0..dl.len() {
            worst = worst.max((dl[n] + w[1].sief[n]).abs());
        }
    }
    worst
}

/// `C₀ = 1/(1 − p̂(0)) + log(p̂(0)/(1 − p̂(0)))`.
pub fn probability_floor_offset(p0: f64) -> f64 {
    1.0 / (1.0 - p0) + (p0 / (1.0 - p0)).ln()
}

/// Lower bound `1 − 2/(t + C₀ + 1)` on the target probability, or `None`
/// where the bound is not yet active (`t + C₀ + 1 ≤ 0`).
pub fn probability_floor(t: f64, c0: f64) -> Option<f64> {
    let denom = t + c0 + 1.0;
    (denom > 0.0).then(|| 1.0 - 2.0 / denom)
}

/// Integrates the iEF flow of a softmax-CE model and measures the target
/// probability against its lower bound at every grid point.
///
/// The loss-reduction law behind the bound needs a differentiable model.
/// ReLU networks can slide along a kink, where `dl_n/dt ≠ −s_n`.
pub fn ief_flow_bound_check(
    spec: &ModelSpec,
    theta0: &ParameterVector,
    batch: &Batch,
    horizon: f64,
    dt: f64,
) -> Result<BoundReport, FlowError> {
    if spec.kind() != ModelKind::MlpSoftmaxCe {
        return Err(FlowError::WrongKind("a softmax cross-entropy model"));
    }
    let mut report = BoundReport { min_margin: f64::INFINITY, ..Default::default() };
    let points = integrate_ief_flow(spec, theta0, batch, horizon, dt, &mut report)?;
    let c0: Vec<f64> = points[0]
        .losses
        .iter()
        .map(|l| {
            let p0 = (-l).exp();
            if p0 >= 1.0 {
                f64::INFINITY
            } else {
                probability_floor_offset(p0)
            }
        })
        .collect();
    for point in &points {
        for (n, l) in point.losses.iter().enumerate() {
            let Some(bound) = probability_floor(point.t, c0[n]) else { continue };
            let margin = (-l).exp() - bound;
            if margin < report.min_margin {
                report.min_margin = margin;
                report.worst_time = point.t;
                report.worst_sample = n;
            }
        }
    }
    report.max_loss_law_residual = loss_law_residual(&points, dt);
    report.c0 = c0;
    Ok(report)
}

/// Integrates the iEF flow of a least-squares model and checks
/// `l_n(t) − l* ≤ e^{−2t}(l_n(0) − l*)` with `l* = 0` (interpolation).
pub fn strong_convex_bound_check(
    spec: &ModelSpec,
    theta0: &ParameterVector,
    batch: &Batch,
    horizon: f64,
    dt: f64,
) -> Result<BoundReport, FlowError> {
    if spec.kind() != ModelKind::LinearLeastSquares {
        return Err(FlowError::WrongKind("a least-squares model"));
    }
    let mut report = BoundReport { min_margin: f64::INFINITY, ..Default::default() };
    let points = integrate_ief_flow(spec, theta0, batch, horizon, dt, &mut report)?;
    let l0 = points[0].losses.clone();
    for point in &points {
        let decay = (-2.0 * point.t).exp();
        for (n, l) in point.losses.iter().enumerate() {
            let margin = decay * l0[n] - l;
            if margin < report.min_margin {
                report.min_margin = margin;
                report.worst_time = point.t;
                report.worst_sample = n;
            }
        }
    }
    report.max_loss_law_residual = loss_law_residual(&points, dt);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseMatrix;
    use crate::models::Targets;

    fn lls_toy() -> (ModelSpec, Batch, ParameterVector) {
        let spec = ModelSpec::linear(1);
        let batch =
            Batch::new(DenseMatrix::from_row_slice(2, 1, &[0.0, 1.0]), Targets::Values(vec![0.0, 0.0])).unwrap();
        let theta = ParameterVector::from_vec(&spec, vec![1.0, 1.0]).unwrap();
        (spec, batch, theta)
    }

    fn blobs(seed: u64, n: usize) -> (ModelSpec, Batch, ParameterVector) {
        let spec = ModelSpec::mlp(vec![3, 8, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let inputs = DenseMatrix::from_fn(n, 3, |i, j| {
            let centre = if j == labels[i] { 1.5 } else { 0.0 };
            centre + rng.random_range(-1.0..1.0)
        });
        let theta = ParameterVector::init(&spec, seed);
        (spec, Batch::new(inputs, Targets::Classes(labels)).unwrap(), theta)
    }

    #[test]
    fn ief_one_step_solves_lls_toy() {
        let (spec, data, theta) = lls_toy();
        let mut config = TrainConfig::with_defaults(Optimiser::Ief, 1.0, 1, 2, 2, 0);
        config.damping = Damping::Absolute(1e-14);
        let run = train(&spec, &data, &theta, &config).unwrap();
        assert!(run.theta.as_vector().amax() < 1e-10);
        assert!(run.final_train_loss().unwrap() < 1e-20);
        assert_eq!(run.checkpoints.len(), 2);
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let (spec, data, theta) = blobs(1, 30);
        for opt in Optimiser::ALL {
            let config = TrainConfig::with_defaults(opt, 0.0, 2, 8, 30, 5);
            let run = train(&spec, &data, &theta, &config).unwrap();
            assert_eq!(run.theta, theta, "{opt}");
            let first = run.checkpoints[0].train_loss;
            assert!(run.checkpoints.iter().all(|c| c.train_loss == first));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (spec, data, theta) = blobs(2, 40);
        for opt in [Optimiser::Sf, Optimiser::Ief, Optimiser::Adam] {
            let config = TrainConfig::with_defaults(opt, 0.05, 2, 16, 40, 9);
            let a = train(&spec, &data, &theta, &config).unwrap();
            let b = train(&spec, &data, &theta, &config).unwrap();
            assert_eq!(a.records, b.records);
            assert_eq!(a.theta, b.theta);
        }
    }

    #[test]
    fn last_short_batch_is_kept() {
        let (spec, data, theta) = blobs(3, 30);
        let config = TrainConfig::with_defaults(Optimiser::Sgd, 0.01, 2, 8, 30, 0);
        let run = train(&spec, &data, &theta, &config).unwrap();
        assert_eq!(run.records.len(), 8);
        assert_eq!(run.records.iter().filter(|r| r.epoch == 1).count(), 4);
    }

    #[test]
    fn normalized_decay_step_norms() {
        let (spec, data, theta) = blobs(4, 24);
        let config = TrainConfig::with_defaults(Optimiser::Ef, 0.1, 3, 8, 24, 0);
        let run = train(&spec, &data, &theta, &config).unwrap();
        let total = run.records.len() as f64;
        for r in &run.records {
            let expect = 0.1 * (1.0 - r.step as f64 / total);
            assert!((r.update_norm - expect).abs() < 1e-12, "{r:?}");
        }
        assert!((run.records[0].update_norm - 0.1).abs() < 1e-15);
    }

    #[test]
    fn multistep_schedule() {
        let s = ScheduleSpec { kind: ScheduleKind::MultiStep { milestones: vec![10, 20], factor: 0.1 }, eta0: 1.0, total_steps: 30 };
        assert_eq!(s.eta(9), 1.0);
        assert!((s.eta(10) - 0.1).abs() < 1e-15);
        assert!((s.eta(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn law_residuals_in_vivo() {
        let (spec, data, theta) = blobs(5, 48);
        for opt in [Optimiser::Ef, Optimiser::Ief] {
            let mut config = TrainConfig::with_defaults(opt, 0.05, 2, 8, 48, 1);
            config.record_law_residual = true;
            let run = train(&spec, &data, &theta, &config).unwrap();
            for r in &run.records {
                assert!(r.law_residual.unwrap() < 1e-3, "{opt}: {r:?}");
            }
        }
    }

    #[test]
    fn divergence_keeps_partial_run() {
        let (spec, data, theta) = blobs(6, 24);
        let config = TrainConfig::with_defaults(Optimiser::Sgd, 1e9, 3, 8, 24, 0);
        match train(&spec, &data, &theta, &config) {
            Err(TrainError::Diverged { run, .. }) => {
                assert!(!run.records.is_empty());
                assert_eq!(run.records.last().unwrap().status, StepStatus::Diverged);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let (spec, data, theta) = blobs(7, 10);
        let mut config = TrainConfig::with_defaults(Optimiser::Sgd, 0.1, 1, 11, 10, 0);
        assert!(matches!(train(&spec, &data, &theta, &config), Err(TrainError::InvalidConfig(_))));
        config.batch_size = 5;
        config.schedule.eta0 = -1.0;
        assert!(matches!(train(&spec, &data, &theta, &config), Err(TrainError::InvalidConfig(_))));
        assert_eq!("adam-baseline".parse::<Optimiser>().unwrap(), Optimiser::Adam);
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = ModelSpec::mlp(vec![3, 4, 2]).unwrap();
        let theta = ParameterVector::init(&spec, 11);
        let mut first = Vec::new();
        write_checkpoint(&mut first, &spec, &theta).unwrap();
        let loaded = read_checkpoint(first.as_slice(), &spec).unwrap();
        assert_eq!(loaded, theta);
        let mut second = Vec::new();
        write_checkpoint(&mut second, &spec, &loaded).unwrap();
        assert_eq!(first, second);
        assert_eq!(&first[..4], b"NGCK");
        assert_eq!(first.len(), 24 + 8 * spec.num_params());

        let other = ModelSpec::mlp(vec![3, 4, 2]).map(|s| s.canonical()).unwrap();
        assert_eq!(other, spec.canonical());
        let mut bad = first.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice(), &spec), Err(CheckpointError::BadMagic)));
        let relu_free = ModelSpec::new(ModelKind::MlpSoftmaxCe, vec![3, 4, 2], models::Activation::Identity).unwrap();
        assert!(matches!(read_checkpoint(first.as_slice(), &relu_free), Err(CheckpointError::SpecMismatch)));
        assert!(matches!(read_checkpoint(&first[..30], &spec), Err(CheckpointError::Io(_))));
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = StepRecord { step: 0, epoch: 1, loss: 0.5, update_norm: 1.0, eta: 0.1, status: StepStatus::Ok, law_residual: None };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,epoch,loss,update_norm,eta,status\n0,1,5e-1,1e0,1e-1,ok\n");
    }

    #[test]
    fn c0_values() {
        assert!((probability_floor_offset(0.5) - 2.0).abs() < 1e-15);
        assert_eq!(probability_floor(0.0, 2.0), Some(1.0 - 2.0 / 3.0));
        assert_eq!(probability_floor(0.0, -1.5), None);
    }

    #[test]
    fn single_two_class_sample_bound() {
        let spec = ModelSpec::mlp(vec![1, 2]).unwrap();
        let batch = Batch::new(DenseMatrix::from_row_slice(1, 1, &[1.0]), Targets::Classes(vec![0])).unwrap();
        let theta = ParameterVector::zeros(&spec);
        let report = ief_flow_bound_check(&spec, &theta, &batch, 20.0, 1e-3).unwrap();
        assert!((report.c0[0] - 2.0).abs() < 1e-12);
        assert!(report.min_margin >= 0.0, "{report:?}");
        assert!(report.max_loss_law_residual < 1e-3);
    }

    #[test]
    fn lls_toy_decays_at_exact_rate() {
        let (spec, batch, theta) = lls_toy();
        let report = strong_convex_bound_check(&spec, &theta, &batch, 5.0, 1e-3).unwrap();
        // the flow has l_n(t) = e^{−2t} l_n(0) exactly; only integrator error remains
        assert!(report.min_margin.abs() < 1e-9, "{report:?}");
        assert!(report.max_loss_law_residual < 1e-5);
    }

    #[test]
    fn converged_sample_has_zero_margin() {
        let spec = ModelSpec::linear(1);
        // ∇z at x = 1 and x = −1 are orthogonal, so the fitted sample stays fitted
        let batch =
            Batch::new(DenseMatrix::from_row_slice(2, 1, &[1.0, -1.0]), Targets::Values(vec![1.0, 2.0])).unwrap();
        let theta = ParameterVector::from_vec(&spec, vec![0.5, 0.5]).unwrap();
        let report = strong_convex_bound_check(&spec, &theta, &batch, 1.0, 1e-3).unwrap();
        assert!(report.min_margin > -1e-9, "{report:?}");
        assert!(matches!(
            ief_flow_bound_check(&spec, &theta, &batch, 1.0, 1e-3),
            Err(FlowError::WrongKind(_))
        ));
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let spec = ModelSpec::linear(1);
        // two samples at the same x with different targets: rank-1 Gram
        let batch =
            Batch::new(DenseMatrix::from_row_slice(2, 1, &[1.0, 1.0]), Targets::Values(vec![0.0, 1.0])).unwrap();
        let theta = ParameterVector::from_vec(&spec, vec![2.0, 2.0]).unwrap();
        assert!(matches!(
            strong_convex_bound_check(&spec, &theta, &batch, 1.0, 1e-2),
            Err(FlowError::RankDeficiency { .. })
        ));
    }
}
