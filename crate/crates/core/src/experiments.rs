//! Desk-scale classification study: γ ratios along an Adam run, the damping
//! sweep on three of its checkpoints, and a final-loss comparison of the
//! exact optimisers.

use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, DataError, MixtureSpec};
use crate::evaluation::{self, EvalError, Evaluation, SweepGrid, SweepRow};
use crate::models::{Batch, ModelError, ModelSpec, ParameterVector};
use crate::optim::{self, Checkpoint, Optimiser, TrainConfig, TrainError, TrainRun};
use crate::updates::{Damping, Method, UpdateRequest};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{optimiser} run (seed {seed}) failed: {source}")]
    Train { optimiser: Optimiser, seed: u64, source: Box<TrainError> },
}

/// Base learning rates, tuned on the default task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub sgd: f64,
    pub ef: f64,
    pub ief: f64,
    pub sf: f64,
    pub adam: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { sgd: 0.01, ef: 0.003, ief: 1.5, sf: 0.1, adam: 0.01 }
    }
}

impl LearningRates {
    pub fn get(&self, optimiser: Optimiser) -> f64 {
        match optimiser {
            Optimiser::Sgd => self.sgd,
            Optimiser::Ef => self.ef,
            Optimiser::Ief => self.ief,
            Optimiser::Sf => self.sf,
            Optimiser::Adam => self.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskTask {
    pub mixture: MixtureSpec,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub rates: LearningRates,
}

impl Default for DeskTask {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec { samples: 2048, dim: 16, classes: 4, separation: 0.5, seed: 0 },
            hidden: vec![64, 64],
            epochs: 30,
            batch_size: 64,
            eval_batches: 20,
            eval_batch_size: 64,
            rates: LearningRates::default(),
        }
    }
}

impl DeskTask {
    pub fn spec(&self) -> Result<ModelSpec, ModelError> {
        let mut widths = vec![self.mixture.dim];
        widths.extend(&self.hidden);
        widths.push(self.mixture.classes);
        ModelSpec::mlp(widths)
    }

    pub fn data(&self) -> Result<Batch, DataError> {
        data::synthetic_mixture(&self.mixture)
    }

    pub fn train(&self, data: &Batch, optimiser: Optimiser, seed: u64) -> Result<TrainRun, ExperimentError> {
        let spec = self.spec()?;
        let init = ParameterVector::init(&spec, seed);
        let config = TrainConfig::with_defaults(
            optimiser,
            self.rates.get(optimiser),
            self.epochs,
            self.batch_size,
            data.len(),
            seed,
        );
        optim::train(&spec, data, &init, &config)
            .map_err(|e| ExperimentError::Train { optimiser, seed, source: Box::new(e) })
    }
}

/// `count` disjoint batches drawn from a seeded permutation; wraps around if
/// the dataset is too small.
pub fn evaluation_batches(data: &Batch, count: usize, size: usize, seed: u64) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..count)
        .map(|b| {
            let idx: Vec<usize> = (0..size).map(|i| order[(b * size + i) % order.len()]).collect();
            data.select(&idx)
        })
        .collect()
}

/// Mean and std of the four per-checkpoint ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointGammas {
    pub checkpoint: String,
    pub epoch: usize,
    pub ef_over_sgd: (Option<f64>, Option<f64>),
    pub ief_over_sgd: (Option<f64>, Option<f64>),
    pub sf_over_ef: (Option<f64>, Option<f64>),
    pub imbalance: (Option<f64>, Option<f64>),
    pub evaluation: Evaluation,
}

fn method_gammas(eval: &Evaluation, method: Method) -> Vec<Option<f64>> {
    eval.reports.iter().filter(|r| r.method == method).map(|r| r.gamma).collect()
}

pub fn gamma_requests(seed: u64) -> Vec<UpdateRequest> {
    let damping = Damping::default();
    vec![
        UpdateRequest::sgd(),
        UpdateRequest::new(Method::Ef, damping),
        UpdateRequest::new(Method::Ief, damping),
        UpdateRequest::new(Method::Sf, damping).with_seed(seed),
    ]
}

/// Evaluates sgd/ef/ief/sf at one checkpoint and condenses the reports.
pub fn checkpoint_gammas(
    spec: &ModelSpec,
    checkpoint: &Checkpoint,
    batches: &[Batch],
    seed: u64,
) -> Result<CheckpointGammas, EvalError> {
    let evaluation = evaluation::evaluate_methods(spec, &checkpoint.theta, batches, &gamma_requests(seed))?;
    Ok(CheckpointGammas::summarize(checkpoint.id(), checkpoint.epoch, evaluation))
}

impl CheckpointGammas {
    /// Condenses an evaluation; ratios whose methods were not requested stay `None`.
    pub fn summarize(checkpoint: String, epoch: usize, evaluation: Evaluation) -> Self {
        let ratio = |m: Method| -> (Option<f64>, Option<f64>) {
            let v: Vec<f64> =
                evaluation.reports.iter().filter(|r| r.method == m).filter_map(|r| r.gamma_ratio_sgd).collect();
            evaluation::mean_std(&v)
        };
        let sf_ef: Vec<f64> = method_gammas(&evaluation, Method::Sf)
            .into_iter()
            .zip(method_gammas(&evaluation, Method::Ef))
            .filter_map(|(s, e)| Some(s? / e?))
            .collect();
        let imbalance: Vec<f64> = evaluation.imbalance.iter().flatten().copied().collect();
        Self {
            checkpoint,
            epoch,
            ef_over_sgd: ratio(Method::Ef),
            ief_over_sgd: ratio(Method::Ief),
            sf_over_ef: evaluation::mean_std(&sf_ef),
            imbalance: evaluation::mean_std(&imbalance),
            evaluation,
        }
    }
}

/// Summary CSV, one row per checkpoint with mean and std of each ratio.
pub fn write_gamma_summary_csv<W: std::io::Write>(out: W, rows: &[CheckpointGammas]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "checkpoint",
        "epoch",
        "ef_over_sgd",
        "ef_over_sgd_std",
        "ief_over_sgd",
        "ief_over_sgd_std",
        "sf_over_ef",
        "sf_over_ef_std",
        "imbalance",
        "imbalance_std",
    ])?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        let mut record = vec![r.checkpoint.clone(), r.epoch.to_string()];
        for (mean, std) in [r.ef_over_sgd, r.ief_over_sgd, r.sf_over_ef, r.imbalance] {
            record.push(cell(mean));
            record.push(cell(std));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// First trained (epoch 1), middle and last checkpoints; epoch 0 only when alone.
pub fn sweep_checkpoints(checkpoints: &[Checkpoint]) -> Vec<&Checkpoint> {
    if checkpoints.is_empty() {
        return Vec::new();
    }
    let trained = &checkpoints[usize::from(checkpoints.len() > 1 && checkpoints[0].epoch == 0)..];
    let mut picks = vec![&trained[0], &trained[(trained.len() - 1) / 2], &trained[trained.len() - 1]];
    picks.dedup_by_key(|c| c.epoch);
    picks
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaStudy {
    pub run: TrainRun,
    pub gammas: Vec<CheckpointGammas>,
    pub sweep: Vec<SweepRow>,
}

impl GammaStudy {
    pub fn at_epoch(&self, epoch: usize) -> Option<&CheckpointGammas> {
        self.gammas.iter().find(|g| g.epoch == epoch)
    }
}

/// Trains the Adam baseline, evaluates every epoch checkpoint and runs the
/// damping sweep on the first, middle and last ones.
pub fn gamma_study(task: &DeskTask, seed: u64, grid: &SweepGrid) -> Result<GammaStudy, ExperimentError> {
    let spec = task.spec()?;
    let data = task.data()?;
    let run = task.train(&data, Optimiser::Adam, seed)?;
    let batches = evaluation_batches(&data, task.eval_batches, task.eval_batch_size, seed ^ 0x5eed);
    let gammas = run
        .checkpoints
        .iter()
        .map(|c| checkpoint_gammas(&spec, c, &batches, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sweep = Vec::new();
    for c in sweep_checkpoints(&run.checkpoints) {
        sweep.extend(evaluation::damping_sweep(
            &spec,
            &c.theta,
            &batches,
            grid,
            &[Method::Ef, Method::Ief, Method::Sf],
            &c.id(),
            seed,
        )?);
    }
    Ok(GammaStudy { run, gammas, sweep })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimiserResult {
    pub optimiser: Optimiser,
    /// Final mean training loss per seed; `None` for a diverged run.
    pub final_losses: Vec<Option<f64>>,
}

impl OptimiserResult {
    /// Median with diverged runs ranked as +∞.
    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.final_losses.iter().map(|l| l.unwrap_or(f64::INFINITY)).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Final-loss comparison; runs for different (optimiser, seed) pairs execute in parallel.
pub fn optimiser_study(
    task: &DeskTask,
    optimisers: &[Optimiser],
    seeds: &[u64],
) -> Result<Vec<OptimiserResult>, ExperimentError> {
    let data = task.data()?;
    let cells: Vec<(Optimiser, u64)> =
        optimisers.iter().flat_map(|&o| seeds.iter().map(move |&s| (o, s))).collect();
    let losses = cells
        .par_iter()
        .map(|&(o, s)| match task.train(&data, o, s) {
            Ok(run) => Ok(run.final_train_loss()),
            Err(ExperimentError::Train { source, .. }) if matches!(*source, TrainError::Diverged { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(optimisers
        .iter()
        .enumerate()
        .map(|(i, &optimiser)| OptimiserResult {
            optimiser,
            final_losses: losses[i * seeds.len()..(i + 1) * seeds.len()].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DeskTask {
        DeskTask {
            mixture: MixtureSpec { samples: 96, dim: 4, classes: 3, separation: 1.5, seed: 1 },
            hidden: vec![6],
            epochs: 2,
            batch_size: 16,
            eval_batches: 3,
            eval_batch_size: 16,
            ..DeskTask::default()
        }
    }

    #[test]
    fn evaluation_batches_are_disjoint() {
        let data = tiny().data().unwrap();
        let batches = evaluation_batches(&data, 3, 32, 5);
        let mut rows: Vec<Vec<u64>> = batches
            .iter()
            .flat_map(|b| (0..b.len()).map(|i| b.input_row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<_>>())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 96);
    }

    #[test]
    fn sweep_checkpoint_picks() {
        let task = tiny();
        let data = task.data().unwrap();
        let run = task.train(&data, Optimiser::Adam, 3).unwrap();
        let picks: Vec<usize> = sweep_checkpoints(&run.checkpoints).iter().map(|c| c.epoch).collect();
        assert_eq!(picks, vec![1, 2]);
    }

    #[test]
    fn tiny_study_is_deterministic() {
        let task = tiny();
        let grid = SweepGrid::log_spaced(-8, 0, 3).unwrap();
        let a = gamma_study(&task, 4, &grid).unwrap();
        let b = gamma_study(&task, 4, &grid).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gammas.len(), 3);
        assert_eq!(a.sweep.len(), 2 * 3 * 3);
        for g in &a.gammas {
            assert!(g.ief_over_sgd.0.is_some() && g.ef_over_sgd.0.is_some() && g.sf_over_ef.0.is_some());
        }
    }

    #[test]
    fn median_ranks_divergence_last() {
        let r = OptimiserResult { optimiser: Optimiser::Ef, final_losses: vec![Some(1.0), None, Some(3.0)] };
        assert_eq!(r.median(), 3.0);
        let r = OptimiserResult { optimiser: Optimiser::Ef, final_losses: vec![Some(1.0), Some(2.0)] };
        assert_eq!(r.median(), 1.5);
    }
}
