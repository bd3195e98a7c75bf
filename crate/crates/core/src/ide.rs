//! Induced-distribution experiment.
//!
//! At a checkpoint θₜ, every training and test example is replaced by its PGD
//! image under θₜ. A fresh model φₜ is then trained from scratch, with the
//! standard loss, on the induced training set and tested without any attack
//! on the induced test set. The retraining step only sees the induced
//! datasets: [`retrain_on_induced`] has no access to θₜ.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, Params};
use crate::seeds;
use crate::training::{self, Checkpoint, TrainConfig};

/// Default interpolation target: training error at or below 0.5%.
pub const DEFAULT_INTERPOLATION_TARGET: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeConfig {
    /// Architecture of the retrained model φₜ.
    pub spec: ModelSpec,
    /// Retraining schedule. `stop_at_train_error` is overridden by `interpolation_target`.
    pub train: TrainConfig,
    #[serde(default = "default_target")]
    pub interpolation_target: f64,
    /// Independent retrains per checkpoint; results are averaged.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Turn a missed interpolation target into an error instead of a flag.
    #[serde(default)]
    pub require_interpolation: bool,
}

fn default_target() -> f64 {
    DEFAULT_INTERPOLATION_TARGET
}

fn default_repeats() -> usize {
    1
}

impl IdeConfig {
    pub fn new(spec: ModelSpec, train: TrainConfig) -> Self {
        Self {
            spec,
            train,
            interpolation_target: DEFAULT_INTERPOLATION_TARGET,
            repeats: 1,
            require_interpolation: false,
        }
    }

    /// Retrain seed of repetition `r`; repetition 0 uses the configured seed.
    pub fn repeat_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.train.seed
        } else {
            seeds::derive(self.train.seed, &["ide-repeat"], r as u64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdeRepeat {
    pub seed: u64,
    pub train_error: f64,
    pub test_error: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeResult {
    pub t: usize,
    /// Mean over repeats.
    pub ide_train_error: f64,
    /// Mean over repeats.
    pub ide_test_error: f64,
    /// Sample standard deviation of the test error over repeats (0 for one repeat).
    pub ide_test_error_std: f64,
    /// False if any repeat stopped above the interpolation target.
    pub interpolated: bool,
    pub repeats: Vec<IdeRepeat>,
}

/// The induced datasets and the first repeat's retrained model, kept for
/// downstream generalisation-gap and bound computations.
#[derive(Debug, Clone)]
pub struct IdeRun {
    pub result: IdeResult,
    pub model: Params,
    pub induced_train: LabeledDataset,
    pub induced_test: LabeledDataset,
}

/// Trains φ from a fresh initialisation on `induced_train` and reports its
/// clean error on both induced sets.
pub fn retrain_on_induced(
    induced_train: &LabeledDataset,
    induced_test: &LabeledDataset,
    cfg: &IdeConfig,
    repeat: usize,
) -> Result<(IdeRepeat, Params)> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.repeat_seed(repeat);
    train_cfg.schedule.clear();
    train_cfg.stop_at_train_error = Some(cfg.interpolation_target);
    let (phi, history) = training::standard_train(&cfg.spec, induced_train, &train_cfg)?;
    let train_error = history.last().map_or(1.0, |h| h.train_error);
    let test_error = training::eval_errors(&phi, induced_test, None, 0)?.standard_error;
    Ok((
        IdeRepeat {
            seed: train_cfg.seed,
            train_error,
            test_error,
            epochs_run: history.len(),
        },
        phi,
    ))
}

pub fn run_ide(
    ckpt: &Checkpoint,
    train: &LabeledDataset,
    test: &LabeledDataset,
    atk: &AttackConfig,
    cfg: &IdeConfig,
    induce_seed: u64,
) -> Result<IdeResult> {
    Ok(run_ide_detailed(ckpt, train, test, atk, cfg, induce_seed)?.result)
}

pub fn run_ide_detailed(
    ckpt: &Checkpoint,
    train: &LabeledDataset,
    test: &LabeledDataset,
    atk: &AttackConfig,
    cfg: &IdeConfig,
    induce_seed: u64,
) -> Result<IdeRun> {
    let induced_train = data::materialize_induced(train, &ckpt.params, atk, seeds::derive(induce_seed, &["train"], 0))?;
    let induced_test = data::materialize_induced(test, &ckpt.params, atk, seeds::derive(induce_seed, &["test"], 0))?;
    let repeats = cfg.repeats.max(1);
    let mut runs = Vec::with_capacity(repeats);
    let mut model = None;
    for r in 0..repeats {
        let (rep, phi) = retrain_on_induced(&induced_train, &induced_test, cfg, r)?;
        if model.is_none() {
            model = Some(phi);
        }
        runs.push(rep);
    }
    let n = runs.len() as f64;
    let mean_train = runs.iter().map(|r| r.train_error).sum::<f64>() / n;
    let mean_test = runs.iter().map(|r| r.test_error).sum::<f64>() / n;
    let std_test = if runs.len() > 1 {
        (runs.iter().map(|r| (r.test_error - mean_test).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let interpolated = runs.iter().all(|r| r.train_error <= cfg.interpolation_target);
    if !interpolated {
        let worst = runs.iter().map(|r| r.train_error).fold(0.0, f64::max);
        if cfg.require_interpolation {
            return Err(Error::NotInterpolated {
                train_error: worst,
                target: cfg.interpolation_target,
            });
        }
        log::warn!(
            "IDE at t={}: retrain stopped at train error {worst:.4} above target {}",
            ckpt.t,
            cfg.interpolation_target
        );
    }
    Ok(IdeRun {
        result: IdeResult {
            t: ckpt.t,
            ide_train_error: mean_train,
            ide_test_error: mean_test,
            ide_test_error_std: std_test,
            interpolated,
            repeats: runs,
        },
        model: model.expect("at least one repeat"),
        induced_train,
        induced_test,
    })
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub t: usize,
    pub outcome: std::result::Result<IdeResult, String>,
}

/// One IDE per checkpoint, in checkpoint order. A failing checkpoint is
/// recorded and the sweep continues.
pub fn ide_sweep(
    trajectory: &[Checkpoint],
    train: &LabeledDataset,
    test: &LabeledDataset,
    atk: &AttackConfig,
    cfg: &IdeConfig,
    induce_seed: u64,
) -> Result<Vec<SweepEntry>> {
    if trajectory.is_empty() {
        return Err(Error::InvalidConfig("IDE sweep needs at least one checkpoint".into()));
    }
    Ok(trajectory
        .par_iter()
        .map(|ck| SweepEntry {
            t: ck.t,
            outcome: run_ide(ck, train, test, atk, cfg, induce_seed).map_err(|e| e.to_string()),
        })
        .collect())
}
