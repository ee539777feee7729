//! Flat TOML experiment config, validated in full before any compute.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::data::MixtureSpec;
use crate::experiments::{DeskTask, LearningRates};
use crate::optim::{Optimiser, ScheduleKind};
use crate::toyviz::{GridConfig, Toy};
use crate::updates::{Damping, Method};

/// Raw keys as written. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub dataset: Option<String>,
    pub samples: Option<usize>,
    pub dim: Option<usize>,
    pub classes: Option<usize>,
    pub separation: Option<f64>,
    pub data_seed: Option<u64>,
    pub csv_path: Option<PathBuf>,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,

    pub hidden: Option<Vec<usize>>,
    pub init: Option<Vec<f64>>,

    pub optimisers: Option<Vec<String>>,
    pub lr_sgd: Option<f64>,
    pub lr_ef: Option<f64>,
    pub lr_ief: Option<f64>,
    pub lr_sf: Option<f64>,
    pub lr_adam: Option<f64>,
    pub schedule: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub damping: Option<f64>,
    pub damping_mode: Option<String>,
    pub seeds: Option<Vec<u64>>,
    pub out: Option<PathBuf>,

    pub checkpoint_dir: Option<PathBuf>,
    pub methods: Option<Vec<String>>,
    pub cg_iters: Option<usize>,
    pub eval_batches: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub eval_seed: Option<u64>,

    pub sweep_lo_exp: Option<i32>,
    pub sweep_hi_exp: Option<i32>,
    pub sweep_points: Option<usize>,

    pub grid_min: Option<f64>,
    pub grid_max: Option<f64>,
    pub grid_points: Option<usize>,
    pub step_norm: Option<f64>,
    pub max_steps: Option<usize>,

    pub checks: Option<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Synthetic(MixtureSpec),
    Csv { path: PathBuf, classes: usize },
    Idx { images: PathBuf, labels: PathBuf, classes: usize },
    Toy(Toy),
}

/// Validated settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub init: Option<Vec<f64>>,
    pub optimisers: Vec<Optimiser>,
    pub rates: LearningRates,
    /// `None` keeps each optimiser's default schedule.
    pub schedule: Option<ScheduleKind>,
    pub epochs: usize,
    pub batch_size: usize,
    pub damping: Damping,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub cg_iters: Option<usize>,
    pub eval_batches: usize,
    pub eval_batch_size: usize,
    pub eval_seed: u64,
    pub sweep: (i32, i32, usize),
    pub grid: GridConfig,
    pub step_norm: f64,
    pub max_steps: usize,
    pub checks: Vec<String>,
}

pub fn parse(text: &str) -> Result<RawConfig, ConfigError> {
    toml::from_str(text).map_err(|e| bad(e.to_string().trim_end().to_string()))
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() { p } else { base.join(p) }
}

fn positive(name: &str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() { Ok(v) } else { Err(bad(format!("`{name}` must be finite and > 0, got {v}"))) }
}

fn nonzero(name: &str, v: usize) -> Result<usize, ConfigError> {
    if v > 0 { Ok(v) } else { Err(bad(format!("`{name}` must be at least 1"))) }
}

impl RawConfig {
    /// Validates against defaults; relative paths are taken from `base`.
    pub fn validate(self, base: &Path) -> Result<Settings, ConfigError> {
        let task = DeskTask::default();
        let classes = self.classes.unwrap_or(task.mixture.classes);
        let dataset = match self.dataset.as_deref().unwrap_or("synthetic") {
            "synthetic" => DatasetSpec::Synthetic(MixtureSpec {
                samples: nonzero("samples", self.samples.unwrap_or(task.mixture.samples))?,
                dim: nonzero("dim", self.dim.unwrap_or(task.mixture.dim))?,
                classes,
                separation: self.separation.unwrap_or(task.mixture.separation),
                seed: self.data_seed.unwrap_or(task.mixture.seed),
            }),
            "csv" => DatasetSpec::Csv {
                path: resolve(base, self.csv_path.ok_or_else(|| bad("dataset `csv` needs `csv_path`"))?),
                classes,
            },
            "idx" => DatasetSpec::Idx {
                images: resolve(base, self.idx_images.ok_or_else(|| bad("dataset `idx` needs `idx_images`"))?),
                labels: resolve(base, self.idx_labels.ok_or_else(|| bad("dataset `idx` needs `idx_labels`"))?),
                classes,
            },
            "toy-lls" => DatasetSpec::Toy(Toy::LeastSquares),
            "toy-logistic" => DatasetSpec::Toy(Toy::Logistic),
            other => {
                return Err(bad(format!(
                    "unknown dataset `{other}` (expected synthetic, csv, idx, toy-lls or toy-logistic)"
                )))
            }
        };
        if classes < 2 {
            return Err(bad("`classes` must be at least 2"));
        }
        if let DatasetSpec::Synthetic(m) = &dataset {
            if !(m.separation >= 0.0 && m.separation.is_finite()) {
                return Err(bad("`separation` must be finite and >= 0"));
            }
        }

        let optimisers = self
            .optimisers
            .unwrap_or_else(|| vec!["adam".into()])
            .iter()
            .map(|s| s.parse::<Optimiser>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let d = task.rates;
        let rates = LearningRates {
            sgd: positive("lr_sgd", self.lr_sgd.unwrap_or(d.sgd))?,
            ef: positive("lr_ef", self.lr_ef.unwrap_or(d.ef))?,
            ief: positive("lr_ief", self.lr_ief.unwrap_or(d.ief))?,
            sf: positive("lr_sf", self.lr_sf.unwrap_or(d.sf))?,
            adam: positive("lr_adam", self.lr_adam.unwrap_or(d.adam))?,
        };
        let schedule = match self.schedule.as_deref().unwrap_or("default") {
            "default" => None,
            "constant" => Some(ScheduleKind::Constant),
            "normalized-linear-decay" => Some(ScheduleKind::NormalizedLinearDecay),
            other => {
                return Err(bad(format!(
                    "unknown schedule `{other}` (expected default, constant or normalized-linear-decay)"
                )))
            }
        };
        let factor = self.damping.unwrap_or(Damping::default().value());
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(bad(format!("`damping` must be finite and >= 0, got {factor}")));
        }
        let damping = match self.damping_mode.as_deref().unwrap_or("trace-relative") {
            "trace-relative" => Damping::TraceRelative(factor),
            "absolute" => Damping::Absolute(factor),
            other => return Err(bad(format!("unknown damping_mode `{other}` (expected trace-relative or absolute)"))),
        };
        let seeds = self.seeds.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(bad("`seeds` must not be empty"));
        }
        let methods = self
            .methods
            .unwrap_or_else(|| ["sgd", "ef", "ief", "sf"].map(String::from).to_vec())
            .iter()
            .map(|s| s.parse::<Method>().map_err(|e| bad(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if !methods.contains(&Method::Sgd) {
            return Err(bad("`methods` must include sgd, the reference for every ratio"));
        }
        let sweep = (self.sweep_lo_exp.unwrap_or(-12), self.sweep_hi_exp.unwrap_or(6), self.sweep_points.unwrap_or(10));
        if sweep.2 < 2 || sweep.1 <= sweep.0 {
            return Err(bad("damping sweep needs sweep_points >= 2 and sweep_hi_exp > sweep_lo_exp"));
        }
        let (lo, hi) = (self.grid_min.unwrap_or(-2.0), self.grid_max.unwrap_or(2.0));
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(bad("`grid_min` must be below `grid_max`"));
        }
        let n = nonzero("grid_points", self.grid_points.unwrap_or(41))?;
        Ok(Settings {
            dataset,
            hidden: self.hidden.unwrap_or(task.hidden),
            init: self.init,
            optimisers,
            rates,
            schedule,
            epochs: self.epochs.unwrap_or(task.epochs),
            batch_size: nonzero("batch_size", self.batch_size.unwrap_or(task.batch_size))?,
            damping,
            seeds,
            out: self.out.map(|p| resolve(base, p)),
            checkpoint_dir: self.checkpoint_dir.map(|p| resolve(base, p)),
            methods,
            cg_iters: self.cg_iters,
            eval_batches: nonzero("eval_batches", self.eval_batches.unwrap_or(task.eval_batches))?,
            eval_batch_size: nonzero("eval_batch_size", self.eval_batch_size.unwrap_or(task.eval_batch_size))?,
            eval_seed: self.eval_seed.unwrap_or(0),
            sweep,
            grid: GridConfig { theta0: (lo, hi), theta1: (lo, hi), n0: n, n1: n },
            step_norm: positive("step_norm", self.step_norm.unwrap_or(1e-2))?,
            max_steps: self.max_steps.unwrap_or(2000),
            checks: self.checks.unwrap_or_default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let s = parse("").unwrap().validate(Path::new("/cfg")).unwrap();
        assert_eq!(s.optimisers, vec![Optimiser::Adam]);
        assert_eq!(s.damping, Damping::TraceRelative(1e-12));
        assert_eq!(s.hidden, vec![64, 64]);
        assert_eq!(s.methods, vec![Method::Sgd, Method::Ef, Method::Ief, Method::Sf]);
        assert_eq!(s.grid.n0, 41);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("epochs = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.0.contains("learning_rate"), "{err}");
    }

    #[test]
    fn relative_paths_follow_the_config() {
        let s = parse("dataset = \"csv\"\ncsv_path = \"d.csv\"\nclasses = 2\nout = \"/abs\"\n")
            .unwrap()
            .validate(Path::new("/cfg"))
            .unwrap();
        assert_eq!(s.dataset, DatasetSpec::Csv { path: PathBuf::from("/cfg/d.csv"), classes: 2 });
        assert_eq!(s.out, Some(PathBuf::from("/abs")));
    }

    #[test]
    fn invalid_values() {
        for text in [
            "lr_ief = -1.0",
            "dataset = \"mnist\"",
            "methods = [\"ef\"]",
            "optimisers = [\"lbfgs\"]",
            "batch_size = 0",
            "damping_mode = \"relative\"",
            "seeds = []",
            "dataset = \"idx\"",
        ] {
            assert!(parse(text).unwrap().validate(Path::new(".")).is_err(), "{text}");
        }
    }
}
