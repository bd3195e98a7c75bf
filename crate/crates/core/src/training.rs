//! Standard training, PGD adversarial training, and error evaluation.
//!
//! Both trainers share one minibatch SGD loop. PGD-AT differs only in that
//! each minibatch is replaced by its PGD image under the current parameters
//! before the gradient step, so with ε = 0 the two are step-for-step equal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, InputLoss};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec, Params};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    pub seed: u64,
    /// Epoch indices after which a checkpoint is taken; `0` is the initial model.
    #[serde(default)]
    pub schedule: Vec<usize>,
    /// Stop early once the clean training error is at or below this value.
    #[serde(default)]
    pub stop_at_train_error: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate,
            weight_decay: 0.0,
            seed,
            schedule: (1..=epochs).collect(),
            stop_at_train_error: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "checkpoint schedule must be strictly increasing: {:?}",
                self.schedule
            )));
        }
        if let Some(&last) = self.schedule.last() {
            if last > self.epochs {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint at epoch {last} is past the final epoch {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the minibatch losses the optimiser saw during the epoch.
    pub mean_batch_loss: f64,
    /// Clean error on the full training set at the end of the epoch.
    pub train_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: usize,
    pub params: Params,
    /// Named scalars recorded at save time (e.g. `train_loss`).
    pub metrics: Vec<(String, f64)>,
}

impl Checkpoint {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub history: Vec<EpochRecord>,
    pub final_params: Params,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub standard_error: f64,
    pub robust_error: f64,
    pub mean_loss: f64,
    pub mean_robust_loss: f64,
}

/// Minibatch SGD on cross-entropy from a fresh initialisation.
pub fn standard_train(spec: &ModelSpec, ds: &LabeledDataset, cfg: &TrainConfig) -> Result<(Params, Vec<EpochRecord>)> {
    let traj = train_loop(spec, ds, cfg, None, &mut |_| Ok(()))?;
    Ok((traj.final_params, traj.history))
}

/// PGD adversarial training; returns the checkpoints named by `cfg.schedule`.
pub fn pgd_at_train(spec: &ModelSpec, ds: &LabeledDataset, cfg: &TrainConfig, atk: &AttackConfig) -> Result<Trajectory> {
    pgd_at_train_with_sink(spec, ds, cfg, atk, &mut |_| Ok(()))
}

/// As [`pgd_at_train`], handing each checkpoint to `sink` as soon as it is taken.
pub fn pgd_at_train_with_sink(
    spec: &ModelSpec,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    atk: &AttackConfig,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Trajectory> {
    atk.validate()?;
    train_loop(spec, ds, cfg, Some(atk), sink)
}

fn train_loop(
    spec: &ModelSpec,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    atk: Option<&AttackConfig>,
    sink: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<Trajectory> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = models::init(spec, seeds::derive(cfg.seed, &["init"], 0))?;
    let mut shuffle_rng = seeds::derived_rng(cfg.seed, &["shuffle"], 0);
    let mut attack_rng = seeds::derived_rng(cfg.seed, &["attack"], 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut checkpoints = Vec::with_capacity(cfg.schedule.len());

    let mut take = |t: usize, params: &Params, metrics: Vec<(String, f64)>| -> Result<()> {
        let ckpt = Checkpoint {
            t,
            params: params.clone(),
            metrics,
        };
        sink(&ckpt)?;
        checkpoints.push(ckpt);
        Ok(())
    };
    if cfg.schedule.first() == Some(&0) {
        take(0, &params, Vec::new())?;
    }

    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut xs, ys) = ds.batch(chunk)?;
            if let Some(atk) = atk {
                xs = attack::attack_batch(&xs, &ys, &params, atk, &mut attack_rng)?;
            }
            let (loss, grads) = params.mean_loss_and_grads(&xs, &ys)?;
            if !loss.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { epoch });
            }
            params.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay);
            loss_sum += loss;
            batches += 1;
        }
        if !params.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let train_error = clean_error(&params, ds)?;
        let record = EpochRecord {
            epoch,
            mean_batch_loss: loss_sum / batches as f64,
            train_error,
        };
        history.push(record);
        if cfg.schedule.contains(&epoch) {
            take(
                epoch,
                &params,
                vec![
                    ("train_loss".into(), record.mean_batch_loss),
                    ("train_error".into(), train_error),
                ],
            )?;
        }
        if cfg.stop_at_train_error.is_some_and(|target| train_error <= target) {
            break;
        }
    }
    Ok(Trajectory {
        checkpoints,
        history,
        final_params: params,
    })
}

const EVAL_CHUNK: usize = 256;

fn clean_error(params: &Params, ds: &LabeledDataset) -> Result<f64> {
    Ok(eval_errors(params, ds, None, 0)?.standard_error)
}

/// Clean and robust 0/1 error and mean loss over `ds`. Without an attack the
/// robust figures equal the clean ones. Uniform-random attack starts for
/// example `i` come from the stream `(seed, "eval", i)`.
pub fn eval_errors(params: &Params, ds: &LabeledDataset, atk: Option<&AttackConfig>, seed: u64) -> Result<ErrorReport> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(a) = atk {
        a.validate()?;
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let parts: Vec<[f64; 4]> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let (xs, ys) = ds.batch(chunk)?;
            let (losses, logits) = params.losses_and_logits(&xs, &ys)?;
            let wrong = count_wrong(&logits, &ys);
            let (adv_losses, adv_wrong) = match atk {
                None => (losses.clone(), wrong),
                Some(a) => {
                    let adv = attack_rows(&xs, &ys, chunk, params, a, seed)?;
                    let (l, z) = params.losses_and_logits(&adv, &ys)?;
                    let w = count_wrong(&z, &ys);
                    (l, w)
                }
            };
            Ok([
                wrong as f64,
                adv_wrong as f64,
                losses.iter().sum(),
                adv_losses.iter().sum(),
            ])
        })
        .collect::<Result<_>>()?;
    let n = ds.len() as f64;
    let total = parts.iter().fold([0.0; 4], |mut acc, p| {
        acc.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        acc
    });
    Ok(ErrorReport {
        standard_error: total[0] / n,
        robust_error: total[1] / n,
        mean_loss: total[2] / n,
        mean_robust_loss: total[3] / n,
    })
}

fn attack_rows(
    xs: &Tensor,
    ys: &[usize],
    indices: &[usize],
    loss: &impl InputLoss,
    atk: &AttackConfig,
    seed: u64,
) -> Result<Tensor> {
    let mut starts = xs.clone();
    let n = xs.row_len();
    for (r, &i) in indices.iter().enumerate() {
        let mut rng = seeds::derived_rng(seed, &["eval"], i as u64);
        let s = attack::start_points(&xs.row_tensor(r), atk, &mut rng);
        starts.data_mut()[r * n..(r + 1) * n].copy_from_slice(s.data());
    }
    attack::pgd_k_batch(&starts, xs, ys, loss, atk)
}

fn count_wrong(logits: &Tensor, ys: &[usize]) -> usize {
    (0..logits.rows()).filter(|&r| models::argmax(logits.row(r)) != ys[r]).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub t: usize,
    pub train: ErrorReport,
    pub test: ErrorReport,
    /// `|robust test error − robust train error|`.
    pub gap: f64,
}

/// Robust generalisation gap at each checkpoint, with the test set standing in
/// for the population.
pub fn robust_gap(
    trajectory: &[Checkpoint],
    train: &LabeledDataset,
    test: &LabeledDataset,
    atk: &AttackConfig,
    seed: u64,
) -> Result<Vec<GapRecord>> {
    if trajectory.is_empty() {
        return Err(Error::InvalidConfig("robust gap needs at least one checkpoint".into()));
    }
    trajectory
        .iter()
        .map(|ck| {
            let tr = eval_errors(&ck.params, train, Some(atk), seed)?;
            let te = eval_errors(&ck.params, test, Some(atk), seed)?;
            Ok(GapRecord {
                t: ck.t,
                train: tr,
                test: te,
                gap: (te.robust_error - tr.robust_error).abs(),
            })
        })
        .collect()
}
