//! Labelled datasets: synthetic blobs, IDX (MNIST) loading, induced-set
//! materialisation and splitting.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, InputLoss};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
    name: String,
}

impl LabeledDataset {
    /// Checks the dataset invariants: matching lengths, uniform input shape,
    /// labels below `classes`, every coordinate finite and inside `[0, 1]`.
    pub fn new(name: impl Into<String>, inputs: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.len(),
                labels: labels.len(),
            });
        }
        if let Some(first) = inputs.first() {
            for t in &inputs {
                if t.shape() != first.shape() {
                    return Err(Error::shape("dataset input", first.shape(), t.shape()));
                }
                if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::NonFinite(format!("dataset coordinate {v} outside [0, 1]")));
                }
            }
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &[Tensor] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(Tensor::shape)
    }

    pub fn example(&self, i: usize) -> (&Tensor, usize) {
        (&self.inputs[i], self.labels[i])
    }

    /// Stacks the examples at `indices` into a `[n, ..shape]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let xs: Vec<&Tensor> = indices.iter().map(|&i| &self.inputs[i]).collect();
        let ys = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&xs)?, ys))
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: name.into(),
        }
    }

    /// First `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if let Some(&label) = self.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        self.classes = classes;
        Ok(self)
    }

    /// Writes one CSV row per example: the flattened input, then the label.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let d = self.inputs.first().map_or(0, Tensor::len);
        let mut header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (x, y) in self.inputs.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.data().iter().map(|v| format!("{v:?}")).collect();
            row.push(y.to_string());
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::MalformedCsv(format!("{}: {other:?}", path.display())),
    }
}

/// Gaussian blobs on the unit hypercube.
///
/// Let `b = ⌈log2 K⌉`. Class `c` has mean `μ_c` with
/// `μ_c[j] = 0.5 + separation · (bit_j(c) − 0.5)` for `j < b` and
/// `μ_c[j] = 0.5` for `j ≥ b`; the remaining coordinates carry only noise.
/// Each example is `μ_c + spread · N(0, I)`, clipped to `[0, 1]`. Examples
/// are emitted class by class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub dim: usize,
    pub classes: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub spread: f64,
    /// When set, adds `U(-ε, ε)^d` to every generated point before clipping.
    #[serde(default)]
    pub smoothing_epsilon: Option<f64>,
}

impl BlobsConfig {
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let bits = lattice_bits(self.classes);
        (0..self.dim)
            .map(|j| {
                if j < bits {
                    let bit = ((class >> j) & 1) as f64;
                    0.5 + self.separation * (bit - 0.5)
                } else {
                    0.5
                }
            })
            .collect()
    }
}

fn lattice_bits(classes: usize) -> usize {
    (usize::BITS - (classes.max(1) - 1).leading_zeros()) as usize
}

pub fn gen_blobs(cfg: &BlobsConfig, seed: u64) -> Result<LabeledDataset> {
    if cfg.dim == 0 || cfg.classes < 2 || cfg.dim < lattice_bits(cfg.classes) {
        return Err(Error::InvalidConfig(format!(
            "degenerate blob dimensions: dim {} cannot hold {} class means",
            cfg.dim, cfg.classes
        )));
    }
    if !(cfg.separation > 0.0) || !(cfg.spread >= 0.0) {
        return Err(Error::InvalidConfig("blob separation must be > 0 and spread >= 0".into()));
    }
    let mut rng = seeds::rng(seed);
    let noise = Normal::new(0.0, cfg.spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut inputs = Vec::with_capacity(cfg.classes * cfg.n_per_class);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for c in 0..cfg.classes {
        let mean = cfg.class_mean(c);
        for _ in 0..cfg.n_per_class {
            let mut x: Vec<f64> = mean.iter().map(|m| m + noise.sample(&mut rng)).collect();
            if let Some(eps) = cfg.smoothing_epsilon.filter(|e| *e > 0.0) {
                x.iter_mut().for_each(|v| *v += rng.random_range(-eps..=eps));
            }
            x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            inputs.push(Tensor::vector(x));
            labels.push(c);
        }
    }
    LabeledDataset::new("blobs", inputs, labels, cfg.classes)
}

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

fn read_u32_be(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image file (magic 2051, `u8` pixels) and label file (magic
/// 2049). Pixels are scaled by 1/255; inputs have shape `[1, rows, cols]`.
/// The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lab = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&img, images_path, &lab, labels_path)
}

pub fn parse_idx(img: &[u8], images_path: &Path, lab: &[u8], labels_path: &Path) -> Result<LabeledDataset> {
    let magic = read_u32_be(img, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = read_u32_be(lab, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32_be(img, 4, images_path)? as usize;
    let rows = read_u32_be(img, 8, images_path)? as usize;
    let cols = read_u32_be(img, 12, images_path)? as usize;
    let n_labels = read_u32_be(lab, 4, labels_path)? as usize;
    if n != n_labels {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let needed = 16 + n * pixels;
    if img.len() < needed {
        return Err(Error::Truncated {
            path: images_path.to_path_buf(),
            needed,
            found: img.len(),
        });
    }
    if lab.len() < 8 + n {
        return Err(Error::Truncated {
            path: labels_path.to_path_buf(),
            needed: 8 + n,
            found: lab.len(),
        });
    }
    let inputs = (0..n)
        .map(|i| {
            let px = &img[16 + i * pixels..16 + (i + 1) * pixels];
            Tensor::new(vec![1, rows, cols], px.iter().map(|&b| f64::from(b) / 255.0).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = lab[8..8 + n].iter().map(|&b| usize::from(b)).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    LabeledDataset::new("idx", inputs, labels, classes)
}

/// Replaces every input by its PGD image under `loss`: example `i` becomes
/// `(Q_{x_i, y_i}(x0_i), y_i)`. Uniform-random starts for example `i` come from
/// the stream `(seed, "induced", i)`, so the result does not depend on how
/// the work is split across threads.
pub fn materialize_induced(
    ds: &LabeledDataset,
    loss: &impl InputLoss,
    atk: &AttackConfig,
    seed: u64,
) -> Result<LabeledDataset> {
    atk.validate()?;
    if ds.is_empty() {
        return Ok(ds.clone());
    }
    const CHUNK: usize = 64;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let chunks: Vec<Vec<Tensor>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let (anchors, ys) = ds.batch(chunk)?;
            let mut starts = anchors.clone();
            for (r, &i) in chunk.iter().enumerate() {
                let mut rng = seeds::derived_rng(seed, &["induced"], i as u64);
                let row = attack::start_points(&anchors.row_tensor(r), atk, &mut rng);
                let n = row.len();
                starts.data_mut()[r * n..(r + 1) * n].copy_from_slice(row.data());
            }
            Ok(attack::pgd_k_batch(&starts, &anchors, &ys, loss, atk)?.unstack())
        })
        .collect::<Result<_>>()?;
    let inputs = chunks.into_iter().flatten().collect();
    LabeledDataset::new(format!("{}~induced", ds.name), inputs, ds.labels.clone(), ds.classes)
}

/// Shuffles with `seed` and splits into `(first, second)` with
/// `round(fraction · n)` examples on the first side.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut seeds::rng(seed));
    let cut = (fraction * ds.len() as f64).round() as usize;
    if cut == 0 || cut == ds.len() {
        return Err(Error::EmptySplit {
            train: cut,
            test: ds.len() - cut,
        });
    }
    Ok((
        ds.subset(&idx[..cut], format!("{}[train]", ds.name)),
        ds.subset(&idx[cut..], format!("{}[test]", ds.name)),
    ))
}
