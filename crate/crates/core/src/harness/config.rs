//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "blobs-overfit"
//! seeds = [0, 1, 2, 3, 4]
//! # output_dir = "runs/overfit"     # default: $ADVLAB_OUT/<name>
//!
//! [dataset]
//! kind = "blobs"                    # or "mnist"
//! dim = 4
//! classes = 2
//! n_per_class = 200
//! separation = 0.3
//! spread = 0.12
//! test_fraction = 0.5
//! seed = 0
//!
//! [model]
//! kind = "mlp"                      # or "small-cnn" with channels = [8, 16]
//! widths = [4, 64, 64, 2]
//! input_shape = [4]
//! classes = 2
//!
//! [train]                           # PGD adversarial training
//! epochs = 40
//! batch_size = 32
//! learning_rate = 0.1
//! schedule = [5, 10, 15, 20, 25, 30, 35, 40]
//!
//! [attack]
//! epsilon = 0.1
//! step_size = 0.025
//! steps = 10
//! init = "at-center"                # or "uniform-random"
//!
//! [ide]                             # retraining on induced data; model defaults to [model]
//! epochs = 300
//! batch_size = 32
//! learning_rate = 0.1
//!
//! [metrics]
//! n_pairs = 100
//! bins = 20
//! max_examples = 50
//!
//! [bound]                           # omit beta / loss_bound to estimate them
//! tau = 0.05
//! pairs_per_example = 20
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{self, BlobsConfig, LabeledDataset};
use crate::error::{Error, Result};
use crate::ide::{IdeConfig, DEFAULT_INTERPOLATION_TARGET};
use crate::models::ModelSpec;
use crate::training::TrainConfig;

/// Environment variable naming the root directory for experiment outputs.
pub const OUTPUT_ROOT_ENV: &str = "ADVLAB_OUT";
const DEFAULT_OUTPUT_ROOT: &str = "advlab-out";

pub const PRESETS: &[(&str, &str)] = &[
    ("blobs-overfit", include_str!("presets/blobs-overfit.toml")),
    ("blobs-easy", include_str!("presets/blobs-easy.toml")),
    ("mnist-small", include_str!("presets/mnist-small.toml")),
    ("mnist-paper-attack", include_str!("presets/mnist-paper-attack.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Blobs {
        dim: usize,
        classes: usize,
        n_per_class: usize,
        separation: f64,
        spread: f64,
        #[serde(default)]
        smoothing_epsilon: Option<f64>,
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Mnist {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DatasetSpec::Blobs {
                dim,
                classes,
                n_per_class,
                separation,
                spread,
                smoothing_epsilon,
                test_fraction,
                seed,
            } => {
                let ds = data::gen_blobs(
                    &BlobsConfig {
                        dim: *dim,
                        classes: *classes,
                        n_per_class: *n_per_class,
                        separation: *separation,
                        spread: *spread,
                        smoothing_epsilon: *smoothing_epsilon,
                    },
                    *seed,
                )?;
                let (train, test) = data::split(&ds, 1.0 - test_fraction, crate::seeds::derive(*seed, &["split"], 0))?;
                Ok((train, test))
            }
            DatasetSpec::Mnist {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_limit,
                test_limit,
            } => {
                let mut train = data::load_idx(train_images, train_labels)?.with_classes(10)?;
                let mut test = data::load_idx(test_images, test_labels)?.with_classes(10)?;
                if let Some(n) = train_limit {
                    train = train.take(*n);
                }
                if let Some(n) = test_limit {
                    test = test.take(*n);
                }
                Ok((train, test))
            }
        }
    }

    fn check_files(&self) -> Result<()> {
        if let DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.exists() {
                    return Err(Error::InvalidConfig(format!("dataset file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Points every MNIST path at `dir`, keeping the file names.
    pub fn rebase_mnist(&mut self, dir: &Path) {
        if let DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = self
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if let Some(name) = p.file_name() {
                    *p = dir.join(name);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Option<Vec<usize>>,
}

impl TrainSettings {
    pub fn to_config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(self.epochs, self.batch_size, self.learning_rate, seed);
        c.weight_decay = self.weight_decay;
        if let Some(s) = &self.schedule {
            c.schedule = s.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdeSettings {
    #[serde(default)]
    pub model: Option<ModelSpec>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_target")]
    pub interpolation_target: f64,
    #[serde(default = "one")]
    pub repeats: usize,
}

fn default_target() -> f64 {
    DEFAULT_INTERPOLATION_TARGET
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSettings {
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Evaluate metrics on at most this many leading examples of each split.
    #[serde(default)]
    pub max_examples: Option<usize>,
}

fn default_pairs() -> usize {
    250
}

fn default_bins() -> usize {
    20
}

impl Default for MetricsSettings {
    fn default() -> Self {
        Self {
            n_pairs: default_pairs(),
            bins: default_bins(),
            max_examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    /// Fixed Lipschitz constant; estimated when absent.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Fixed loss bound; estimated when absent.
    #[serde(default)]
    pub loss_bound: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_constant_pairs")]
    pub pairs_per_example: usize,
}

fn default_tau() -> f64 {
    0.05
}

fn default_constant_pairs() -> usize {
    20
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            beta: None,
            loss_bound: None,
            tau: default_tau(),
            pairs_per_example: default_constant_pairs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSettings,
    pub attack: AttackConfig,
    pub ide: IdeSettings,
    #[serde(default)]
    pub metrics: MetricsSettings,
    #[serde(default)]
    pub bound: BoundSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                Error::InvalidConfig(format!("unknown preset `{name}`; available: {}", names.join(", ")))
            })?;
        Self::from_toml(text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        self.model.validate()?;
        self.attack.validate()?;
        let train = self.train_config(0);
        train.validate()?;
        if train.schedule.is_empty() {
            return Err(Error::InvalidConfig("checkpoint schedule is empty".into()));
        }
        self.ide_config(0).train.validate()?;
        self.ide_model().validate()?;
        if self.ide_model().input_shape != self.model.input_shape || self.ide_model().classes != self.model.classes {
            return Err(Error::InvalidConfig("IDE model must share input shape and classes with the main model".into()));
        }
        if self.metrics.n_pairs == 0 || self.metrics.bins == 0 {
            return Err(Error::InvalidConfig("metrics need positive n_pairs and bins".into()));
        }
        if !(self.bound.tau > 0.0 && self.bound.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {}", self.bound.tau)));
        }
        self.dataset.check_files()
    }

    /// PGD-AT config for root seed `seed`.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train.to_config(crate::seeds::derive(seed, &["pgd-at"], 0))
    }

    pub fn ide_model(&self) -> ModelSpec {
        self.ide.model.clone().unwrap_or_else(|| self.model.clone())
    }

    /// IDE config for root seed `seed`. The retrain seed depends on the root
    /// seed only, so every checkpoint of a run retrains from the same initialisation.
    pub fn ide_config(&self, seed: u64) -> IdeConfig {
        let mut train = TrainConfig::new(
            self.ide.epochs,
            self.ide.batch_size,
            self.ide.learning_rate,
            crate::seeds::derive(seed, &["ide"], 0),
        );
        train.weight_decay = self.ide.weight_decay;
        let mut c = IdeConfig::new(self.ide_model(), train);
        c.interpolation_target = self.ide.interpolation_target;
        c.repeats = self.ide.repeats;
        c
    }

    pub fn output_dir(&self) -> PathBuf {
        match &self.output_dir {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
                root.join(&self.name)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for (name, _) in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(&cfg.name, name);
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn blob_presets_validate() {
        for name in ["blobs-overfit", "blobs-easy"] {
            ExperimentConfig::preset(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn mnist_presets_use_table_attack() {
        for name in ["mnist-small", "mnist-paper-attack"] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(cfg.attack, AttackConfig::mnist());
            assert_eq!(cfg.train.batch_size, 128);
            assert_eq!(cfg.train.weight_decay, 0.0);
        }
    }

    #[test]
    fn missing_mnist_files_rejected() {
        let mut cfg = ExperimentConfig::preset("mnist-small").unwrap();
        cfg.dataset.rebase_mnist(Path::new("/nonexistent"));
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut cfg = ExperimentConfig::preset("blobs-easy").unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage_seeds_are_disjoint() {
        let cfg = ExperimentConfig::preset("blobs-easy").unwrap();
        assert_ne!(cfg.train_config(3).seed, cfg.ide_config(3).train.seed);
        assert_ne!(cfg.train_config(3).seed, cfg.train_config(4).seed);
    }
}
