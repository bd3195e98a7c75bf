use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use advlab::bound::{self, BoundInputs};
use advlab::data;
use advlab::harness::config::DatasetSpec;
use advlab::harness::{self, checkpoint, run, ExperimentConfig};
use advlab::ide;

#[derive(Parser)]
#[command(name = "advlab", version, about = "PGD adversarial training, induced-distribution experiments and dispersion metrics")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: blobs-overfit, blobs-easy, mnist-small, mnist-paper-attack.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Run a single root seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config and $ADVLAB_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory holding the four MNIST IDX files.
    #[arg(long, global = true, env = "ADVLAB_MNIST_DIR")]
    mnist_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: PGD-AT, errors, IDE, metrics, bound, report and plots.
    Run,
    /// PGD adversarial training only; writes checkpoints.
    TrainAt,
    /// Induced-distribution experiment on saved checkpoints.
    Ide {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Dispersion, distance and angle metrics of saved checkpoints.
    Metrics {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Evaluate the generalisation bound.
    Bound {
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        loss_bound: f64,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        m: usize,
        #[arg(long)]
        eld: f64,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
    },
    /// Render SVG figures from a report CSV.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        histograms: Option<PathBuf>,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    #[command(subcommand)]
    Data(DataCmd),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Generate a Gaussian-blob dataset and write train/test CSVs.
    Gen {
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        separation: f64,
        #[arg(long, default_value_t = 0.1)]
        spread: f64,
        #[arg(long)]
        smoothing_epsilon: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        test_fraction: f64,
    },
    /// Check local MNIST IDX files and optionally export them as CSV.
    FetchMnist {
        #[arg(long)]
        csv: bool,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match (&c.config, &c.preset) {
        (Some(p), _) => ExperimentConfig::from_file(p)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => bail!("pass --config FILE or --preset NAME"),
    };
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &c.out {
        cfg.output_dir = Some(o.clone());
    }
    if let Some(d) = &c.mnist_dir {
        cfg.dataset.rebase_mnist(d);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_run(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let outcome = harness::run_experiment(&cfg)?;
    let dir = &outcome.output_dir;
    let plots = harness::emit_plots(&dir.join("report.csv"), Some(&dir.join("histograms.csv")), dir)?;
    for n in &plots.notes {
        log::info!("plot: {n}");
    }
    print_json(&outcome.summary)?;
    eprintln!("results in {}", dir.display());
    if outcome.succeeded() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &outcome.failures {
            eprintln!("failed: {f}");
        }
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_train_at(c: &Common) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let (train, _) = cfg.dataset.load()?;
    let dir = cfg.output_dir();
    let mut code = ExitCode::SUCCESS;
    for &seed in &cfg.seeds {
        let (cks, err) = run::train_seed(&cfg, seed, &train, Some(&dir));
        for ck in &cks {
            println!("{}", run::checkpoint_path(&dir, seed, ck.t).display());
        }
        if let Some(e) = err {
            eprintln!("seed {seed}: {e}");
            code = ExitCode::FAILURE;
        }
    }
    Ok(code)
}

fn seed_of(c: &Common, cfg: &ExperimentConfig) -> u64 {
    c.seed.unwrap_or(cfg.seeds[0])
}

fn cmd_ide(c: &Common, paths: &[PathBuf]) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let seed = seed_of(c, &cfg);
    let (train, test) = cfg.dataset.load()?;
    let mut code = ExitCode::SUCCESS;
    for p in paths {
        let ck = checkpoint::load_checkpoint_for(p, &cfg.model).with_context(|| p.display().to_string())?;
        match ide::run_ide(&ck, &train, &test, &cfg.attack, &cfg.ide_config(seed), advlab::seeds::derive(seed, &["induce"], ck.t as u64)) {
            Ok(r) => print_json(&r)?,
            Err(e) => {
                eprintln!("{}: {e}", p.display());
                code = ExitCode::FAILURE;
            }
        }
    }
    Ok(code)
}

fn cmd_metrics(c: &Common, paths: &[PathBuf], split: &str) -> Result<ExitCode> {
    let cfg = load_config(c)?;
    let seed = seed_of(c, &cfg);
    let (train, test) = cfg.dataset.load()?;
    let ds = match split {
        "train" => &train,
        "test" => &test,
        other => bail!("unknown split `{other}`"),
    };
    for p in paths {
        let ck = checkpoint::load_checkpoint_for(p, &cfg.model).with_context(|| p.display().to_string())?;
        let m = run::checkpoint_metrics(&cfg, seed, &ck.params, ck.t, ds, split)?;
        print_json(&serde_json::json!({
            "checkpoint": p,
            "t": ck.t,
            "eld": m.dispersion.mean,
            "eld_se": m.dispersion.std_error,
            "mean_d": m.distance.mean,
            "mean_phi": m.angle.mean,
            "excluded": m.failed,
        }))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn mnist_files(dir: &Path) -> [PathBuf; 4] {
    [
        "train-images-idx3-ubyte",
        "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte",
        "t10k-labels-idx1-ubyte",
    ]
    .map(|f| dir.join(f))
}

fn cmd_data(c: &Common, cmd: &DataCmd) -> Result<ExitCode> {
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
    match cmd {
        DataCmd::Gen {
            dim,
            classes,
            n_per_class,
            separation,
            spread,
            smoothing_epsilon,
            test_fraction,
        } => {
            let (train, test) = if c.config.is_some() || c.preset.is_some() {
                load_config(c)?.dataset.load()?
            } else {
                let spec = DatasetSpec::Blobs {
                    dim: *dim,
                    classes: *classes,
                    n_per_class: *n_per_class,
                    separation: *separation,
                    spread: *spread,
                    smoothing_epsilon: *smoothing_epsilon,
                    test_fraction: *test_fraction,
                    seed: c.seed.unwrap_or(0),
                };
                spec.load()?
            };
            train.write_csv(&out.join("train.csv"))?;
            test.write_csv(&out.join("test.csv"))?;
            println!("{} train / {} test examples written to {}", train.len(), test.len(), out.display());
        }
        DataCmd::FetchMnist { csv } => {
            let dir = c.mnist_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
            let [ti, tl, vi, vl] = mnist_files(&dir);
            let train = data::load_idx(&ti, &tl)?;
            let test = data::load_idx(&vi, &vl)?;
            println!("MNIST in {}: {} train, {} test, {} classes", dir.display(), train.len(), test.len(), train.classes());
            if *csv {
                train.write_csv(&out.join("mnist-train.csv"))?;
                test.write_csv(&out.join("mnist-test.csv"))?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let res = match &cli.cmd {
        Cmd::Run => cmd_run(c),
        Cmd::TrainAt => cmd_train_at(c),
        Cmd::Ide { checkpoints } => cmd_ide(c, checkpoints),
        Cmd::Metrics { checkpoints, split } => cmd_metrics(c, checkpoints, split),
        Cmd::Bound {
            beta,
            loss_bound,
            dim,
            epsilon,
            m,
            eld,
            tau,
        } => bound::theorem_bound(&BoundInputs {
            beta: *beta,
            loss_bound: *loss_bound,
            dim: *dim,
            epsilon: *epsilon,
            m: *m,
            eld: *eld,
            tau: *tau,
        })
        .map(|v| {
            println!("{v}");
            ExitCode::SUCCESS
        })
        .map_err(Into::into),
        Cmd::Plot { report, histograms, dir } => {
            let dir = dir.clone().or_else(|| report.parent().map(Path::to_path_buf)).unwrap_or_default();
            harness::emit_plots(report, histograms.as_deref(), &dir).map(|o| {
                for f in &o.files {
                    println!("{}", f.display());
                }
                for n in &o.notes {
                    eprintln!("note: {n}");
                }
                ExitCode::SUCCESS
            })
            .map_err(Into::into)
        }
        Cmd::Data(d) => cmd_data(c, d),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
