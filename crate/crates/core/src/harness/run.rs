//! End-to-end experiment driver.
//!
//! Per root seed: PGD adversarial training with checkpoints saved to disk,
//! then for every checkpoint the clean and robust errors, the IDE, the
//! dispersion metrics and the bound. Stage seeds are derived from the root
//! seed under the labels `pgd-at`, `eval`, `induce`, `ide`, `metrics` and
//! `bound`, so no stage consumes another's randomness.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::ExperimentConfig;
use super::report::{self, CsvSink, DiagnosticsRow, HistogramRow, ReportRow, Summary};
use crate::attack::PgdOperator;
use crate::bound::{self, BoundInputs};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::ide;
use crate::metrics::{self, DatasetMetrics, HistogramEdges, McConfig};
use crate::models::Params;
use crate::seeds::derive;
use crate::training::{self, Checkpoint, ErrorReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub seed: u64,
    pub t: Option<usize>,
    pub stage: String,
    pub message: String,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.t {
            Some(t) => write!(f, "seed {} t {} {}: {}", self.seed, t, self.stage, self.message),
            None => write!(f, "seed {} {}: {}", self.seed, self.stage, self.message),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointResult {
    pub row: ReportRow,
    pub diagnostics: DiagnosticsRow,
    pub histograms: Vec<HistogramRow>,
    pub failures: Vec<StageFailure>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<ReportRow>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub summary: Summary,
    pub failures: Vec<StageFailure>,
}

impl RunOutcome {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn checkpoint_path(dir: &Path, seed: u64, t: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("seed-{seed}")).join(format!("t-{t:04}.ckpt"))
}

fn metric_subset(ds: &LabeledDataset, cfg: &ExperimentConfig) -> LabeledDataset {
    match cfg.metrics.max_examples {
        Some(n) if n < ds.len() => ds.take(n),
        _ => ds.clone(),
    }
}

/// Clean and robust errors of a checkpoint on both splits.
pub fn checkpoint_errors(
    cfg: &ExperimentConfig,
    seed: u64,
    params: &Params,
    t: usize,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<(ErrorReport, ErrorReport)> {
    let tr = training::eval_errors(params, train, Some(&cfg.attack), derive(seed, &["eval", "train"], t as u64))?;
    let te = training::eval_errors(params, test, Some(&cfg.attack), derive(seed, &["eval", "test"], t as u64))?;
    Ok((tr, te))
}

/// Dispersion metrics of a checkpoint's PGD operator on a split.
pub fn checkpoint_metrics(
    cfg: &ExperimentConfig,
    seed: u64,
    params: &Params,
    t: usize,
    ds: &LabeledDataset,
    split: &str,
) -> Result<DatasetMetrics> {
    let op = PgdOperator::new(params, cfg.attack);
    let mc = McConfig::new(cfg.metrics.n_pairs, derive(seed, &["metrics", split], t as u64));
    let edges = HistogramEdges::for_ball(cfg.attack.epsilon, cfg.model.input_dim(), cfg.metrics.bins)?;
    metrics::dataset_metrics(&metric_subset(ds, cfg), &op, &mc, &edges)
}

pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    seed: u64,
    ck: &Checkpoint,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> CheckpointResult {
    let t = ck.t;
    let mut row = ReportRow {
        seed,
        t,
        ..Default::default()
    };
    let mut diagnostics = DiagnosticsRow {
        seed,
        t,
        ..Default::default()
    };
    let mut histograms = Vec::new();
    let mut failures = Vec::new();
    let mut fail = |stage: &str, e: Error| {
        log::error!("seed {seed} t {t} {stage}: {e}");
        failures.push(StageFailure {
            seed,
            t: Some(t),
            stage: stage.into(),
            message: e.to_string(),
        });
    };

    match checkpoint_errors(cfg, seed, &ck.params, t, train, test) {
        Ok((tr, te)) => {
            row.std_train_err = Some(tr.standard_error);
            row.std_test_err = Some(te.standard_error);
            row.rob_train_err = Some(tr.robust_error);
            row.rob_test_err = Some(te.robust_error);
            row.gap = Some((te.robust_error - tr.robust_error).abs());
        }
        Err(e) => fail("errors", e),
    }

    let ide_run = ide::run_ide_detailed(ck, train, test, &cfg.attack, &cfg.ide_config(seed), derive(seed, &["induce"], t as u64));
    let ide_run = match ide_run {
        Ok(run) => {
            row.ide_train_err = Some(run.result.ide_train_error);
            row.ide_test_err = Some(run.result.ide_test_error);
            diagnostics.ide_interpolated = Some(run.result.interpolated);
            diagnostics.ide_test_err_std = Some(run.result.ide_test_error_std);
            Some(run)
        }
        Err(e) => {
            fail("ide", e);
            None
        }
    };

    match checkpoint_metrics(cfg, seed, &ck.params, t, test, "test") {
        Ok(m) => {
            for (name, e) in [("dispersion", &m.dispersion), ("distance", &m.distance), ("angle", &m.angle)] {
                histograms.extend(report::histogram_rows(seed, t, "test", name, &e.histogram));
            }
            row.eld = Some(m.dispersion.mean);
            row.eld_se = Some(m.dispersion.std_error);
            row.mean_d = Some(m.distance.mean);
            row.mean_phi = Some(m.angle.mean);
            diagnostics.metrics_excluded = Some(m.failed);
        }
        Err(e) => fail("metrics", e),
    }

    if let (Some(run), Some(eld)) = (&ide_run, row.eld) {
        let bound_stage = || -> Result<(f64, f64, f64, f64)> {
            let (beta, loss_bound) = match (cfg.bound.beta, cfg.bound.loss_bound) {
                (Some(b), Some(l)) => (b, l),
                (b, l) => {
                    let est = bound::estimate_beta_b(
                        &run.model,
                        &metric_subset(&run.induced_train, cfg),
                        &cfg.attack,
                        cfg.bound.pairs_per_example,
                        derive(seed, &["bound"], t as u64),
                    )?;
                    (b.unwrap_or(est.beta_hat), l.unwrap_or(est.loss_bound_hat))
                }
            };
            let value = bound::theorem_bound(&BoundInputs {
                beta,
                loss_bound,
                dim: cfg.model.input_dim(),
                epsilon: cfg.attack.epsilon,
                m: train.len(),
                eld,
                tau: cfg.bound.tau,
            })?;
            let gg = bound::empirical_gg(&run.model, &run.induced_train, &run.induced_test)?;
            Ok((value, gg, beta, loss_bound))
        };
        match bound_stage() {
            Ok((value, gg, beta, loss_bound)) => {
                row.bound_value = Some(value);
                diagnostics.empirical_gg = Some(gg);
                diagnostics.beta_hat_lower = Some(beta);
                diagnostics.loss_bound_hat_lower = Some(loss_bound);
                diagnostics.bound_holds = Some(value >= gg);
            }
            Err(e) => fail("bound", e),
        }
    }

    CheckpointResult {
        row,
        diagnostics,
        histograms,
        failures,
    }
}

/// PGD adversarial training for one root seed, saving every checkpoint under
/// `dir`. On a training failure the checkpoints taken so far are returned
/// alongside the error.
pub fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &LabeledDataset,
    dir: Option<&Path>,
) -> (Vec<Checkpoint>, Option<Error>) {
    let mut kept = Vec::new();
    let mut sink = |ck: &Checkpoint| -> Result<()> {
        if let Some(d) = dir {
            save_checkpoint(&checkpoint_path(d, seed, ck.t), ck)?;
        }
        kept.push(ck.clone());
        Ok(())
    };
    let res = training::pgd_at_train_with_sink(&cfg.model, train, &cfg.train_config(seed), &cfg.attack, &mut sink);
    (kept, res.err())
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = cfg.output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let (train, test) = cfg.dataset.load()?;
    if train.input_shape() != Some(cfg.model.input_shape.as_slice()) || train.classes() > cfg.model.classes {
        return Err(Error::InvalidConfig(format!(
            "dataset shape {:?} with {} classes does not fit model input {:?} with {} classes",
            train.input_shape(),
            train.classes(),
            cfg.model.input_shape,
            cfg.model.classes
        )));
    }
    log::info!("{}: {} train / {} test examples", cfg.name, train.len(), test.len());

    let mut report_sink = CsvSink::create(&dir.join("report.csv"))?;
    let mut diag_sink = CsvSink::create(&dir.join("diagnostics.csv"))?;
    let mut hist_sink = CsvSink::create(&dir.join("histograms.csv"))?;
    let mut rows = Vec::new();
    let mut diagnostics = Vec::new();
    let mut failures = Vec::new();

    for &seed in &cfg.seeds {
        let (checkpoints, err) = train_seed(cfg, seed, &train, Some(&dir));
        if let Some(e) = err {
            log::error!("seed {seed} training: {e}");
            failures.push(StageFailure {
                seed,
                t: None,
                stage: "pgd-at".into(),
                message: e.to_string(),
            });
        }
        let results: Vec<CheckpointResult> = checkpoints
            .par_iter()
            .map(|ck| evaluate_checkpoint(cfg, seed, ck, &train, &test))
            .collect();
        for r in results {
            report_sink.write(&r.row)?;
            diag_sink.write(&r.diagnostics)?;
            for h in &r.histograms {
                hist_sink.write(h)?;
            }
            rows.push(r.row);
            diagnostics.push(r.diagnostics);
            failures.extend(r.failures);
        }
        log::info!("seed {seed}: {} checkpoints evaluated", checkpoints.len());
    }

    let summary = report::summarize(
        &cfg.name,
        &cfg.seeds,
        &rows,
        &diagnostics,
        failures.iter().map(ToString::to_string).collect(),
    );
    report::write_summary(&dir, &summary)?;
    Ok(RunOutcome {
        output_dir: dir,
        rows,
        diagnostics,
        summary,
        failures,
    })
}
