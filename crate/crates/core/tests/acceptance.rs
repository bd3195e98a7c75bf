//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for each
//! and exits non-zero if any failed. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 8 10`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;

use advlab::attack::{self, AttackConfig, Perturbation, PgdOperator};
use advlab::autodiff::finite_diff_check;
use advlab::bound::{self, BoundInputs};
use advlab::data::{self, BlobsConfig, LabeledDataset};
use advlab::harness::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CURRENT_VERSION};
use advlab::harness::{run_experiment, ExperimentConfig};
use advlab::ide::{self, IdeConfig};
use advlab::metrics::{self, McConfig};
use advlab::models::{self, build_graph, one_hot, ModelSpec, Params, Reduction};
use advlab::seeds;
use advlab::training::{self, Checkpoint, TrainConfig};
use advlab::{Result, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Result<Outcome>,
}

const CRITERIA: &[Criterion] = &[
    Criterion {
        id: 1,
        name: "gradient correctness",
        budget: Duration::from_secs(60),
        run: gradient_correctness,
    },
    Criterion {
        id: 2,
        name: "attack soundness",
        budget: Duration::from_secs(60),
        run: attack_soundness,
    },
    Criterion {
        id: 3,
        name: "oracle equivalence",
        budget: Duration::from_secs(60),
        run: oracle_equivalence,
    },
    Criterion {
        id: 4,
        name: "dispersion estimator calibration",
        budget: Duration::from_secs(60),
        run: dispersion_calibration,
    },
    Criterion {
        id: 5,
        name: "trace-covariance identity",
        budget: Duration::from_secs(10),
        run: trace_covariance_identity,
    },
    Criterion {
        id: 6,
        name: "triangle inequality",
        budget: Duration::from_secs(300),
        run: triangle_inequality,
    },
    Criterion {
        id: 7,
        name: "degenerate-radius reductions",
        budget: Duration::from_secs(120),
        run: degenerate_radius,
    },
    Criterion {
        id: 8,
        name: "bound evaluation",
        budget: Duration::from_secs(1),
        run: bound_evaluation,
    },
    Criterion {
        id: 9,
        name: "blobs-overfit correlations",
        budget: Duration::from_secs(1800),
        run: overfit_correlations,
    },
    Criterion {
        id: 10,
        name: "checkpoint persistence",
        budget: Duration::from_secs(10),
        run: persistence,
    },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(c.run));
        let elapsed = start.elapsed();
        let (pass, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let in_budget = elapsed <= c.budget;
        let ok = pass && in_budget;
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {:>2} {:<32} {} ({:.2}s of {}s) {}{}",
            c.id,
            c.name,
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            detail,
            if in_budget { "" } else { " [over time budget]" }
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn rand_tensor(rng: &mut seeds::Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn random_spec(rng: &mut seeds::Rng, i: usize) -> ModelSpec {
    let classes = rng.random_range(2..=4);
    if i.is_multiple_of(2) {
        let depth = rng.random_range(1..=3);
        let mut widths = vec![rng.random_range(1..=5)];
        widths.extend((0..depth - 1).map(|_| rng.random_range(2..=6)));
        widths.push(classes);
        ModelSpec::mlp(widths)
    } else {
        let c = rng.random_range(1..=2);
        let h = rng.random_range(4..=6);
        let w = rng.random_range(4..=6);
        ModelSpec::cnn_with_channels([c, h, w], [rng.random_range(1..=3), rng.random_range(1..=3)], classes)
    }
}

fn gradient_correctness() -> Result<Outcome> {
    let mut rng = seeds::rng(1);
    let mut worst: f64 = 0.0;
    let mut redraws = 0;
    for i in 0..50 {
        let spec = random_spec(&mut rng, i);
        let n = rng.random_range(1..=3);
        let (mut graph, _) = build_graph(&spec, n, Some(Reduction::Mean))?;
        loop {
            let params: Vec<(String, Tensor)> = spec
                .param_layout()
                .into_iter()
                .map(|(name, shape, _)| (name, rand_tensor(&mut rng, shape, -1.0, 1.0)))
                .collect();
            let mut xshape = vec![n];
            xshape.extend_from_slice(&spec.input_shape);
            let x = rand_tensor(&mut rng, xshape, 0.0, 1.0);
            let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.classes)).collect();
            let targets = one_hot(&ys, spec.classes);
            let mut binds: Vec<(&str, &Tensor)> = vec![("x", &x), ("targets", &targets)];
            binds.extend(params.iter().map(|(k, v)| (k.as_str(), v)));
            graph.forward(&binds)?;
            // Central differences straddling a relu or max-pool kink are meaningless.
            if graph.min_kink_margin() < 1e-3 {
                redraws += 1;
                continue;
            }
            worst = worst.max(finite_diff_check(&mut graph, &binds, 1e-5)?);
            break;
        }
    }
    Ok(outcome(worst < 1e-5, format!("max rel err {worst:.2e} over 50 models, {redraws} kink redraws")))
}

fn attack_soundness() -> Result<Outcome> {
    let mut rng = seeds::rng(2);
    let mut violations = 0;
    let mut non_idempotent = 0;
    let mut models_cache: Vec<Params> = Vec::new();
    for s in 0..20 {
        let d = 1 + s % 5;
        models_cache.push(models::init(&ModelSpec::mlp(vec![d, 6, 3]), s as u64)?);
    }
    let n = 10_000;
    for i in 0..n {
        let p = &models_cache[i % models_cache.len()];
        let d = p.spec().input_dim();
        let x = rand_tensor(&mut rng, vec![d], 0.0, 1.0);
        let eps = rng.random_range(0.0..0.5);
        let cfg = AttackConfig::new(eps, rng.random_range(1e-3..0.3), rng.random_range(0..=5));
        let y = rng.random_range(0..3);
        let x0 = if rng.random_bool(0.5) {
            x.clone()
        } else {
            attack::start_points(&x, &AttackConfig { init: attack::Init::UniformRandom, ..cfg }, &mut rng)
        };
        let out = attack::pgd_k(&x0, &x, y, p, &cfg)?;
        for (o, xi) in out.data().iter().zip(x.data()) {
            if (o - xi).abs() > eps + 1e-12 || !(0.0..=1.0).contains(o) {
                violations += 1;
            }
        }
        let v = rand_tensor(&mut rng, vec![d], -0.5, 1.5);
        let once = attack::project_linf(&v, &x, eps)?;
        let twice = attack::project_linf(&once, &x, eps)?;
        if once.data().iter().zip(twice.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            non_idempotent += 1;
        }
    }
    Ok(outcome(
        violations == 0 && non_idempotent == 0,
        format!("{n} runs, {violations} out-of-set coords, {non_idempotent} non-idempotent projections"),
    ))
}

fn robust_error_at(p: &Params, points: &[Tensor], labels: &[usize]) -> Result<f64> {
    let wrong = points
        .iter()
        .zip(labels)
        .map(|(v, &y)| p.predict(v).map(|c| (c != y) as usize))
        .sum::<Result<usize>>()?;
    Ok(wrong as f64 / labels.len() as f64)
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut rng = seeds::rng(3);
    let mut mismatched = 0;
    let mut points_checked = 0;
    for inst in 0..100 {
        let d = rng.random_range(1..=3);
        let p = models::init(&ModelSpec::mlp(vec![d, 2]), 1000 + inst)?;
        let eps = rng.random_range(0.05..0.3);
        let cfg = AttackConfig::new(eps, 2.0 * eps + rng.random_range(0.0..0.5), 1);
        let m = 20;
        let xs: Vec<Tensor> = (0..m).map(|_| rand_tensor(&mut rng, vec![d], 0.0, 1.0)).collect();
        let ys: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
        let mut brute = Vec::with_capacity(m);
        let mut pgd = Vec::with_capacity(m);
        for (x, &y) in xs.iter().zip(&ys) {
            brute.push(attack::brute_force_inner_max(x, y, &p, eps, 5)?.0);
            pgd.push(attack::pgd_k(x, x, y, &p, &cfg)?);
        }
        points_checked += m;
        if robust_error_at(&p, &brute, &ys)? != robust_error_at(&p, &pgd, &ys)? {
            mismatched += 1;
        }
    }
    Ok(outcome(
        mismatched == 0,
        format!("{mismatched}/100 instances disagree ({points_checked} points)"),
    ))
}

struct Identity(f64);

impl Perturbation for Identity {
    fn epsilon(&self) -> f64 {
        self.0
    }
    fn apply(&self, starts: &Tensor, _: &Tensor, _: usize) -> Result<Tensor> {
        Ok(starts.clone())
    }
}

fn dispersion_calibration() -> Result<Outcome> {
    let eps = 0.1;
    let mut worst_z: f64 = 0.0;
    let mut notes = Vec::new();
    for (k, d) in [1usize, 10, 100].into_iter().enumerate() {
        let x = Tensor::full(&[d], 0.5);
        let est = metrics::local_dispersion(&x, 0, &Identity(eps), &McConfig::new(10_000, 40 + k as u64))?;
        let expect = 2.0 * d as f64 * eps * eps / 3.0;
        let z = (est.value - expect).abs() / est.std_error;
        worst_z = worst_z.max(z);
        notes.push(format!("d={d} z={z:.2}"));
    }
    let x = Tensor::full(&[1], 0.5);
    let dt = metrics::mean_distance_to_clean(&x, 0, &Identity(eps), &McConfig::new(10_000, 50))?;
    let z = (dt.value - eps / 2.0).abs() / dt.std_error;
    notes.push(format!("d_t z={z:.2}"));
    Ok(outcome(worst_z <= 3.0 && z <= 3.0, notes.join(", ")))
}

fn trace_covariance_identity() -> Result<Outcome> {
    let mut rng = seeds::rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=60);
        let d = rng.random_range(1..=12);
        let samples: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, vec![d], -2.0, 2.0)).collect();

        let mut pair_sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                pair_sum += samples[i].data().iter().zip(samples[j].data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            }
        }
        let pairwise = pair_sum / (n * (n - 1) / 2) as f64;
        let mut trace = 0.0;
        for c in 0..d {
            let mean = samples.iter().map(|s| s.data()[c]).sum::<f64>() / n as f64;
            trace += samples.iter().map(|s| (s.data()[c] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        }
        let (lib_pair, lib_trace) = metrics::trace_cov_identity_check(&samples)?;
        for (a, b) in [(pairwise, 2.0 * trace), (lib_pair, pairwise), (lib_trace, 2.0 * trace)] {
            worst = worst.max((a - b).abs() / a.abs().max(b.abs()));
        }
    }
    Ok(outcome(worst <= 1e-9, format!("max rel diff {worst:.2e} over 100 sets")))
}

fn blobs(n_per_class: usize, seed: u64) -> Result<LabeledDataset> {
    data::gen_blobs(
        &BlobsConfig {
            dim: 2,
            classes: 2,
            n_per_class,
            separation: 0.5,
            spread: 0.1,
            smoothing_epsilon: None,
        },
        seed,
    )
}

fn triangle_inequality() -> Result<Outcome> {
    let ds = blobs(100, 6)?;
    let spec = ModelSpec::mlp(vec![2, 16, 2]);
    let atk = AttackConfig::new(0.1, 0.025, 10);
    let traj = training::pgd_at_train(&spec, &ds, &TrainConfig::new(10, 16, 0.3, 6), &atk)?;
    let op = PgdOperator::new(&traj.final_params, atk);
    let mut violations = 0;
    let mut lib_disagree = 0;
    let mut min_slack = f64::INFINITY;
    for i in 0..ds.len() {
        let (x, y) = ds.example(i);
        let mc = McConfig::new(250, seeds::derive(6, &["triangle"], i as u64));
        let s = metrics::sample_pairs(x, y, &op, &mc)?;
        let (z, zp) = (s.z.unstack(), s.z_prime.unstack());
        let n = z.len() as f64;
        let mut pair = Vec::with_capacity(z.len());
        let mut diff = Vec::with_capacity(z.len());
        let mut to_x = 0.0;
        for (a, b) in z.iter().zip(&zp) {
            let ab = a.l2_distance(b);
            let (ax, bx) = (a.l2_distance(x), b.l2_distance(x));
            pair.push(ab);
            diff.push(ab - ax - bx);
            to_x += ax + bx;
        }
        let lhs = pair.iter().sum::<f64>() / n;
        let dt = to_x / (2.0 * n);
        let dm = diff.iter().sum::<f64>() / n;
        let sigma = (diff.iter().map(|v| (v - dm).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
        let slack = 2.0 * dt + 3.0 * sigma - lhs;
        min_slack = min_slack.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
        if !metrics::triangle_check(x, y, &op, &mc)?.holds {
            lib_disagree += 1;
        }
    }
    Ok(outcome(
        violations == 0 && lib_disagree == 0,
        format!("{} examples, {violations} violations, min slack {min_slack:.3e}", ds.len()),
    ))
}

fn bits_equal(a: &Params, b: &Params) -> bool {
    a.tensors().len() == b.tensors().len()
        && a.tensors().iter().zip(b.tensors()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn degenerate_radius() -> Result<Outcome> {
    let ds = blobs(60, 7)?;
    let (train, test) = data::split(&ds, 0.5, 7)?;
    let spec = ModelSpec::mlp(vec![2, 12, 2]);
    let atk = AttackConfig::new(0.0, 0.01, 5);
    let cfg = TrainConfig::new(8, 16, 0.3, 7);
    let traj = training::pgd_at_train(&spec, &train, &cfg, &atk)?;
    let (plain, _) = training::standard_train(&spec, &train, &cfg)?;
    let same_params = bits_equal(&traj.final_params, &plain);

    let rep = training::eval_errors(&traj.final_params, &test, Some(&atk), 7)?;
    let same_error = rep.robust_error == rep.standard_error;

    let op = PgdOperator::new(&traj.final_params, atk);
    let mut nonzero_metrics = 0;
    for i in 0..test.len() {
        let (x, y) = test.example(i);
        let m = metrics::example_metrics(x, y, &op, &McConfig::new(50, i as u64))?;
        if m.dispersion != 0.0 || m.distance != 0.0 {
            nonzero_metrics += 1;
        }
    }

    let ide_cfg = IdeConfig::new(spec.clone(), TrainConfig::new(60, 16, 0.5, 70));
    let ck = traj.checkpoints.last().expect("schedule is non-empty");
    let run = ide::run_ide_detailed(ck, &train, &test, &atk, &ide_cfg, 9)?;
    let inputs_unchanged = run.induced_train.inputs() == train.inputs() && run.induced_test.inputs() == test.inputs();
    let mut direct_cfg = ide_cfg.train.clone();
    direct_cfg.schedule.clear();
    direct_cfg.stop_at_train_error = Some(ide_cfg.interpolation_target);
    let (phi, _) = training::standard_train(&spec, &train, &direct_cfg)?;
    let direct = training::eval_errors(&phi, &test, None, 0)?.standard_error;
    let same_ide = run.result.ide_test_error == direct && bits_equal(&run.model, &phi);

    Ok(outcome(
        same_params && same_error && nonzero_metrics == 0 && inputs_unchanged && same_ide,
        format!(
            "params identical {same_params}, robust==standard {same_error}, nonzero metrics {nonzero_metrics}, induced unchanged {inputs_unchanged}, ide==standard {same_ide}"
        ),
    ))
}

fn hand_bound(b: &BoundInputs) -> f64 {
    let sm = (b.m as f64).sqrt();
    2.0 * b.beta / sm * b.eld.sqrt()
        + 2.0 * b.beta * (b.dim as f64).sqrt() * b.epsilon / sm
        + 2.0 * b.loss_bound / sm * (((1.0 / b.tau).ln() / 2.0).sqrt() + 1.0)
}

fn bound_evaluation() -> Result<Outcome> {
    let base = BoundInputs {
        beta: 1.0,
        loss_bound: 1.0,
        dim: 4,
        epsilon: 0.1,
        m: 100,
        eld: 0.01,
        tau: 0.05,
    };
    let v = bound::theorem_bound(&base)?;
    let oracle = hand_bound(&base);
    let reference = 0.5047746830680817;
    let value_ok = (v - reference).abs() / reference <= 1e-6 && (v - oracle).abs() <= 1e-12;

    type Sweep = (&'static str, Vec<BoundInputs>, bool);
    let sweeps: Vec<Sweep> = vec![
        ("beta", [0.1, 0.5, 1.0, 2.0, 10.0].map(|beta| BoundInputs { beta, ..base }).to_vec(), true),
        ("B", [0.1, 0.5, 1.0, 2.0, 10.0].map(|loss_bound| BoundInputs { loss_bound, ..base }).to_vec(), true),
        ("d", [1, 4, 16, 100, 784].map(|dim| BoundInputs { dim, ..base }).to_vec(), true),
        ("eps", [0.0, 0.01, 0.1, 0.3, 1.0].map(|epsilon| BoundInputs { epsilon, ..base }).to_vec(), true),
        ("m", [10, 100, 1_000, 10_000, 60_000].map(|m| BoundInputs { m, ..base }).to_vec(), false),
        ("eld", [0.0, 1e-4, 0.01, 0.1, 1.0].map(|eld| BoundInputs { eld, ..base }).to_vec(), true),
        ("tau", [0.001, 0.01, 0.05, 0.2, 0.9].map(|tau| BoundInputs { tau, ..base }).to_vec(), false),
    ];
    let mut bad = Vec::new();
    for (name, inputs, increasing) in &sweeps {
        let vals: Vec<f64> = inputs.iter().map(bound::theorem_bound).collect::<Result<_>>()?;
        let monotone = vals.windows(2).all(|w| if *increasing { w[1] > w[0] } else { w[1] < w[0] });
        let matches = inputs.iter().zip(&vals).all(|(b, v)| (v - hand_bound(b)).abs() <= 1e-12 * v.abs().max(1.0));
        if !monotone || !matches {
            bad.push(*name);
        }
    }
    Ok(outcome(
        value_ok && bad.is_empty(),
        format!(
            "value {v:.16} (5 d.p. {:.5}), non-monotone sweeps {bad:?}",
            v
        ),
    ))
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn overfit_correlations() -> Result<Outcome> {
    let out = tempfile::tempdir().expect("temp dir");
    let mut cfg = ExperimentConfig::preset("blobs-overfit")?;
    cfg.output_dir = Some(out.path().to_path_buf());
    let run = run_experiment(&cfg)?;

    let checkpoints: std::collections::BTreeSet<usize> = run.rows.iter().map(|r| r.t).collect();
    let get = |f: fn(&advlab::harness::report::ReportRow) -> Option<f64>| -> Vec<f64> {
        run.rows.iter().map(|r| f(r).expect("complete row")).collect()
    };
    let ide = get(|r| r.ide_test_err);
    let gap = get(|r| r.gap);
    let eld = get(|r| r.eld);
    let pooled_ide_gap = pearson(&ide, &gap);
    let pooled_eld_ide = pearson(&eld, &ide);

    let mean_at = |vals: &[f64], t: usize| -> f64 {
        let v: Vec<f64> = run.rows.iter().zip(vals).filter(|(r, _)| r.t == t).map(|(_, v)| *v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let means = |vals: &[f64]| -> Vec<f64> { checkpoints.iter().map(|&t| mean_at(vals, t)).collect() };
    let means_ide_gap = pearson(&means(&ide), &means(&gap));
    let means_eld_ide = pearson(&means(&eld), &means(&ide));

    let s = &run.summary;
    let lib_agrees = [
        (s.corr_ide_test_err_vs_gap.pooled, pooled_ide_gap),
        (s.corr_eld_vs_ide_test_err.pooled, pooled_eld_ide),
        (s.corr_ide_test_err_vs_gap.checkpoint_means, means_ide_gap),
        (s.corr_eld_vs_ide_test_err.checkpoint_means, means_eld_ide),
    ]
    .iter()
    .all(|(lib, ours)| lib.is_some_and(|l| (l - ours).abs() <= 1e-9));

    let shape_ok = run.succeeded() && cfg.seeds.len() >= 5 && checkpoints.len() >= 8;
    let positive = [pooled_ide_gap, pooled_eld_ide, means_ide_gap, means_eld_ide].iter().all(|&c| c > 0.0);
    Ok(outcome(
        shape_ok && lib_agrees && positive,
        format!(
            "{} seeds x {} checkpoints; corr(ide, gap) pooled {pooled_ide_gap:.3} means {means_ide_gap:.3}; corr(eld, ide) pooled {pooled_eld_ide:.3} means {means_eld_ide:.3}",
            cfg.seeds.len(),
            checkpoints.len()
        ),
    ))
}

fn random_checkpoint(rng: &mut seeds::Rng, i: usize) -> Result<Checkpoint> {
    let spec = random_spec(rng, i);
    let params = models::init(&spec, rng.random())?;
    let metrics = (0..rng.random_range(0..3))
        .map(|k| (format!("m{k}"), rng.random_range(-1e3..1e3)))
        .collect();
    Ok(Checkpoint {
        t: rng.random_range(0..10_000),
        params,
        metrics,
    })
}

fn persistence() -> Result<Outcome> {
    let mut rng = seeds::rng(10);
    let dir = tempfile::tempdir().expect("temp dir");
    let mut round_trip_failures = 0;
    let mut undetected = 0;
    for i in 0..100 {
        let ck = random_checkpoint(&mut rng, i)?;
        let path = dir.path().join(format!("ck-{i}.ckpt"));
        save_checkpoint(&path, &ck)?;
        let back = load_checkpoint(&path)?;
        if back.t != ck.t || back.metrics != ck.metrics || !bits_equal(&back.params, &ck.params) {
            round_trip_failures += 1;
        }

        let mut bytes = encode_checkpoint(&ck, CURRENT_VERSION)?;
        let pos = rng.random_range(0..bytes.len());
        bytes[pos] ^= rng.random_range(1..=255u8);
        if decode_checkpoint(&bytes).is_ok() {
            undetected += 1;
        }
    }
    Ok(outcome(
        round_trip_failures == 0 && undetected == 0,
        format!("round trips {}/100 exact, flips detected {}/100", 100 - round_trip_failures, 100 - undetected),
    ))
}
