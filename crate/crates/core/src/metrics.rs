//! Monte-Carlo estimators of how a perturbation operator spreads nearby
//! starting points.
//!
//! For an anchor `(x, y)` and radius ε, `n_pairs` start pairs `(x+ρ, x+ρ′)`
//! are drawn with `ρ, ρ′ ~ U(−ε, ε)^d`, clipped to `[0, 1]`, and pushed
//! through the operator `Q`. Writing `Z = Q(x+ρ)` and `Z′ = Q(x+ρ′)`:
//!
//! * local dispersion γ̃ is the mean of `‖Z − Z′‖²`,
//! * distance to the clean point is the mean of `‖Z − x‖`,
//! * angular spread is the mean angle between `Z` and `Z′`.
//!
//! All estimators draw from the same sampling routine, so calls sharing a
//! seed see identical `Z, Z′`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::Perturbation;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seeds::{self, Rng};
use crate::tensor::{l2_distance, l2_distance_sq, l2_norm, Tensor};

/// Pairs with a norm below this are skipped by the angular estimator.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { n_pairs: 250, seed: 0 }
    }
}

impl McConfig {
    pub fn new(n_pairs: usize, seed: u64) -> Self {
        Self { n_pairs, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        Ok(())
    }
}

/// A sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { value: mean, std_error, n }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    pub estimate: Estimate,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleCheck {
    /// Mean of `‖Z − Z′‖`.
    pub lhs: f64,
    /// Mean of `‖Z − x‖ + ‖Z′ − x‖`, an estimate of `2·E‖Q − x‖`.
    pub rhs: f64,
    /// Standard error of the per-pair difference `lhs − rhs`.
    pub std_error: f64,
    pub holds: bool,
}

/// Operator outputs for `n_pairs` start pairs, row `i` of each tensor being one side of pair `i`.
#[derive(Debug, Clone)]
pub struct PairSamples {
    pub z: Tensor,
    pub z_prime: Tensor,
}

fn uniform_starts(x: &Tensor, eps: f64, n: usize, rng: &mut Rng) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n * x.len());
    for _ in 0..n {
        for &xi in x.data() {
            let r = if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 };
            data.push((xi + r).clamp(0.0, 1.0));
        }
    }
    Tensor::new(shape, data).expect("start shape")
}

pub fn sample_pairs(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<PairSamples> {
    mc.validate()?;
    let eps = op.epsilon();
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidConfig(format!("epsilon must be finite and >= 0, got {eps}")));
    }
    let mut rng = seeds::rng(mc.seed);
    let a = uniform_starts(x, eps, mc.n_pairs, &mut rng);
    let b = uniform_starts(x, eps, mc.n_pairs, &mut rng);
    let z = op.apply(&a, x, y)?;
    let z_prime = op.apply(&b, x, y)?;
    if !z.all_finite() || !z_prime.all_finite() {
        return Err(Error::NonFinite("perturbation operator output".into()));
    }
    Ok(PairSamples { z, z_prime })
}

impl PairSamples {
    pub fn n_pairs(&self) -> usize {
        self.z.rows()
    }

    pub fn dispersion(&self) -> Estimate {
        let v: Vec<f64> = (0..self.n_pairs())
            .map(|i| l2_distance_sq(self.z.row(i), self.z_prime.row(i)))
            .collect();
        Estimate::from_samples(&v)
    }

    pub fn distance_to(&self, x: &Tensor) -> Estimate {
        let v: Vec<f64> = (0..self.n_pairs()).map(|i| l2_distance(self.z.row(i), x.data())).collect();
        Estimate::from_samples(&v)
    }

    pub fn angular_spread(&self) -> Result<AngleEstimate> {
        let mut angles = Vec::with_capacity(self.n_pairs());
        for i in 0..self.n_pairs() {
            let (a, b) = (self.z.row(i), self.z_prime.row(i));
            let (na, nb) = (l2_norm(a), l2_norm(b));
            if na < MIN_NORM || nb < MIN_NORM {
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            angles.push((dot / (na * nb)).clamp(-1.0, 1.0).acos());
        }
        let skipped = self.n_pairs() - angles.len();
        if angles.is_empty() {
            return Err(Error::AllPairsSkipped { skipped });
        }
        Ok(AngleEstimate {
            estimate: Estimate::from_samples(&angles),
            skipped,
        })
    }

    pub fn triangle(&self, x: &Tensor) -> TriangleCheck {
        let n = self.n_pairs();
        let mut lhs = Vec::with_capacity(n);
        let mut rhs = Vec::with_capacity(n);
        for i in 0..n {
            lhs.push(l2_distance(self.z.row(i), self.z_prime.row(i)));
            rhs.push(l2_distance(self.z.row(i), x.data()) + l2_distance(self.z_prime.row(i), x.data()));
        }
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let d = Estimate::from_samples(&diff);
        let l = lhs.iter().sum::<f64>() / n as f64;
        let r = rhs.iter().sum::<f64>() / n as f64;
        TriangleCheck {
            lhs: l,
            rhs: r,
            std_error: d.std_error,
            holds: l <= r + 3.0 * d.std_error,
        }
    }
}

pub fn local_dispersion(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<Estimate> {
    Ok(sample_pairs(x, y, op, mc)?.dispersion())
}

pub fn mean_distance_to_clean(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<Estimate> {
    Ok(sample_pairs(x, y, op, mc)?.distance_to(x))
}

pub fn angular_spread(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<AngleEstimate> {
    sample_pairs(x, y, op, mc)?.angular_spread()
}

pub fn triangle_check(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<TriangleCheck> {
    Ok(sample_pairs(x, y, op, mc)?.triangle(x))
}

/// Returns the mean pairwise squared distance over distinct pairs and twice
/// the trace of the unbiased sample covariance. The two agree up to rounding.
pub fn trace_cov_identity_check(samples: &[Tensor]) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: n });
    }
    let d = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::shape("covariance samples", samples[0].shape(), s.shape()));
    }
    let mut pair_sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            pair_sum += l2_distance_sq(samples[i].data(), samples[j].data());
        }
    }
    let pairwise = pair_sum / (n * (n - 1) / 2) as f64;
    let mut trace = 0.0;
    for k in 0..d {
        let mean = samples.iter().map(|s| s.data()[k]).sum::<f64>() / n as f64;
        trace += samples.iter().map(|s| (s.data()[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    }
    Ok((pairwise, 2.0 * trace))
}

/// Fixed-edge histogram. Bins are half-open except the last, which is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn with_edges(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidConfig("histogram edges must be strictly increasing, at least two".into()));
        }
        let bins = edges.len() - 1;
        Ok(Self {
            edges,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        })
    }

    pub fn linear(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(lo < hi) {
            return Err(Error::InvalidConfig(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let w = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + w * i as f64).collect();
        edges.push(hi);
        Self::with_edges(edges)
    }

    pub fn add(&mut self, v: f64) {
        let last = *self.edges.last().unwrap();
        if v < self.edges[0] {
            self.underflow += 1;
        } else if v > last {
            self.overflow += 1;
        } else if v == last {
            *self.counts.last_mut().unwrap() += 1;
        } else {
            let i = self.edges.partition_point(|&e| e <= v) - 1;
            self.counts[i] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }
}

/// Histogram bin layouts for the three per-example metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEdges {
    pub dispersion: Vec<f64>,
    pub distance: Vec<f64>,
    pub angle: Vec<f64>,
}

impl HistogramEdges {
    /// Linear bins covering the attainable range for radius `eps` in dimension `dim`.
    pub fn for_ball(eps: f64, dim: usize, bins: usize) -> Result<Self> {
        let eps = eps.max(1e-6);
        let lin = |hi: f64| Histogram::linear(0.0, hi, bins).map(|h| h.edges);
        Ok(Self {
            dispersion: lin(4.0 * dim as f64 * eps * eps)?,
            distance: lin(eps * (dim as f64).sqrt())?,
            angle: lin(std::f64::consts::PI)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub dispersion: f64,
    pub distance: f64,
    /// `None` when every pair was skipped.
    pub angle: Option<f64>,
}

/// Dispersion, distance and angle for one example, all from the same draws.
pub fn example_metrics(x: &Tensor, y: usize, op: &dyn Perturbation, mc: &McConfig) -> Result<ExampleMetrics> {
    let s = sample_pairs(x, y, op, mc)?;
    Ok(ExampleMetrics {
        dispersion: s.dispersion().value,
        distance: s.distance_to(x).value,
        angle: s.angular_spread().ok().map(|a| a.estimate.value),
    })
}

/// Per-example metric seed; examples use disjoint streams.
pub fn example_seed(mc: &McConfig, i: usize) -> u64 {
    seeds::derive(mc.seed, &["metrics"], i as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExpectation {
    pub mean: f64,
    /// Across-example standard deviation divided by √m.
    pub std_error: f64,
    pub count: usize,
    pub excluded: usize,
    pub histogram: Histogram,
}

impl DatasetExpectation {
    fn from_values(values: &[f64], excluded: usize, mut histogram: Histogram) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        for &v in values {
            histogram.add(v);
        }
        let e = Estimate::from_samples(values);
        Ok(Self {
            mean: e.value,
            std_error: e.std_error,
            count: values.len(),
            excluded,
            histogram,
        })
    }
}

/// Averages a per-example metric over a dataset. Examples whose metric fails
/// are excluded and counted.
pub fn dataset_expectation<F>(ds: &LabeledDataset, metric: F, mc: &McConfig, edges: Vec<f64>) -> Result<DatasetExpectation>
where
    F: Fn(&Tensor, usize, &McConfig) -> Result<f64> + Sync,
{
    let hist = Histogram::with_edges(edges)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let results: Vec<Result<f64>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = ds.example(i);
            metric(x, y, &McConfig::new(mc.n_pairs, example_seed(mc, i)))
        })
        .collect();
    let values: Vec<f64> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    DatasetExpectation::from_values(&values, results.len() - values.len(), hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dispersion: DatasetExpectation,
    pub distance: DatasetExpectation,
    pub angle: DatasetExpectation,
    /// Examples whose operator call failed outright.
    pub failed: usize,
}

/// All three dataset-level metrics in one pass over the examples.
pub fn dataset_metrics(
    ds: &LabeledDataset,
    op: &dyn Perturbation,
    mc: &McConfig,
    edges: &HistogramEdges,
) -> Result<DatasetMetrics> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per: Vec<Result<ExampleMetrics>> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let (x, y) = ds.example(i);
            example_metrics(x, y, op, &McConfig::new(mc.n_pairs, example_seed(mc, i)))
        })
        .collect();
    let ok: Vec<ExampleMetrics> = per.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failed = per.len() - ok.len();
    if let Some(Err(e)) = per.iter().find(|r| r.is_err()) {
        log::warn!("{failed} examples excluded from metrics; first error: {e}");
    }
    let gam: Vec<f64> = ok.iter().map(|m| m.dispersion).collect();
    let dist: Vec<f64> = ok.iter().map(|m| m.distance).collect();
    let ang: Vec<f64> = ok.iter().filter_map(|m| m.angle).collect();
    Ok(DatasetMetrics {
        dispersion: DatasetExpectation::from_values(&gam, failed, Histogram::with_edges(edges.dispersion.clone())?)?,
        distance: DatasetExpectation::from_values(&dist, failed, Histogram::with_edges(edges.distance.clone())?)?,
        angle: DatasetExpectation::from_values(&ang, per.len() - ang.len(), Histogram::with_edges(edges.angle.clone())?)?,
        failed,
    })
}


#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;

    fn centre(d: usize) -> Tensor {
        Tensor::vector(vec![0.5; d])
    }

    #[test]
    fn identity_dispersion_matches_closed_form() {
        let eps = 0.1;
        for d in [1, 10, 100] {
            let est = local_dispersion(&centre(d), 0, &Identity(eps), &McConfig::new(10_000, d as u64)).unwrap();
            let truth = 2.0 * d as f64 * eps * eps / 3.0;
            assert!((est.value - truth).abs() <= 3.0 * est.std_error, "d={d}: {est:?} vs {truth}");
        }
    }

    #[test]
    fn dispersion_error_shrinks_like_inverse_root_n() {
        let eps = 0.2;
        let truth = 2.0 * 5.0 * eps * eps / 3.0;
        let small = local_dispersion(&centre(5), 0, &Identity(eps), &McConfig::new(1_000, 3)).unwrap();
        let large = local_dispersion(&centre(5), 0, &Identity(eps), &McConfig::new(10_000, 4)).unwrap();
        assert!((small.value - truth).abs() <= 3.0 * small.std_error);
        assert!((large.value - truth).abs() <= 3.0 * large.std_error);
        let ratio = large.std_error / small.std_error;
        assert!((ratio * 10f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn constant_operator_has_zero_dispersion() {
        let est = local_dispersion(&centre(3), 0, &Constant(0.1, vec![0.2, 0.3, 0.4]), &McConfig::new(50, 0)).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn zero_radius_identity_is_zero() {
        let s = sample_pairs(&centre(4), 0, &Identity(0.0), &McConfig::new(20, 0)).unwrap();
        assert_eq!(s.dispersion().value, 0.0);
        assert_eq!(s.distance_to(&centre(4)).value, 0.0);
    }

    #[test]
    fn identity_distance_in_one_dimension() {
        let eps = 0.1;
        let est = mean_distance_to_clean(&centre(1), 0, &Identity(eps), &McConfig::new(10_000, 9)).unwrap();
        assert!((est.value - eps / 2.0).abs() <= 3.0 * est.std_error, "{est:?}");
    }

    #[test]
    fn two_orthogonal_vectors_give_quarter_pi() {
        let a = angular_spread(&centre(3), 0, &TwoOrthogonal(0.1), &McConfig::new(10_000, 2)).unwrap();
        let q = std::f64::consts::FRAC_PI_4;
        assert_eq!(a.skipped, 0);
        assert!((a.estimate.value - q).abs() <= 3.0 * a.estimate.std_error, "{a:?}");
    }

    #[test]
    fn zero_output_pairs_are_skipped() {
        let r = angular_spread(&centre(2), 0, &Constant(0.1, vec![0.0, 0.0]), &McConfig::new(10, 0));
        assert!(matches!(r, Err(Error::AllPairsSkipped { skipped: 10 })));
    }

    #[test]
    fn parallel_outputs_have_zero_angle() {
        let a = angular_spread(&centre(2), 0, &Constant(0.1, vec![0.3, 0.4]), &McConfig::new(10, 0)).unwrap();
        assert_eq!(a.estimate.value, 0.0);
    }

    #[test]
    fn triangle_holds_for_identity() {
        let eps = 0.1;
        let t = triangle_check(&centre(1), 0, &Identity(eps), &McConfig::new(10_000, 5)).unwrap();
        assert!(t.holds);
        assert!((t.lhs - 2.0 * eps / 3.0).abs() < 0.01);
        assert!((t.rhs - eps).abs() < 0.01);
    }

    #[test]
    fn estimators_share_draws() {
        let mc = McConfig::new(64, 11);
        let op = Identity(0.05);
        let x = centre(3);
        let m = example_metrics(&x, 0, &op, &mc).unwrap();
        assert_eq!(m.dispersion, local_dispersion(&x, 0, &op, &mc).unwrap().value);
        assert_eq!(m.distance, mean_distance_to_clean(&x, 0, &op, &mc).unwrap().value);
        assert_eq!(m.angle.unwrap(), angular_spread(&x, 0, &op, &mc).unwrap().estimate.value);
    }

    #[test]
    fn trace_identity_matches_covariance() {
        let mut rng = seeds::rng(1);
        let samples: Vec<Tensor> = (0..100)
            .map(|_| Tensor::vector((0..7).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let (pair, trace) = trace_cov_identity_check(&samples).unwrap();
        assert!((pair - trace).abs() <= 1e-12 * trace.abs().max(1.0));
    }

    #[test]
    fn trace_identity_needs_two_samples() {
        assert!(matches!(
            trace_cov_identity_check(&[centre(2)]),
            Err(Error::InsufficientSamples { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn starts_are_clipped_to_box() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let s = sample_pairs(&x, 0, &Identity(0.3), &McConfig::new(200, 0)).unwrap();
        assert!(s.z.data().iter().chain(s.z_prime.data()).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_mean_of_stub_metrics() {
        let ds = LabeledDataset::new("two", vec![centre(1), Tensor::vector(vec![0.2])], vec![0, 1], 2).unwrap();
        let metric = |x: &Tensor, _: usize, _: &McConfig| Ok(if x.data()[0] == 0.5 { 1.0 } else { 3.0 });
        let e = dataset_expectation(&ds, metric, &McConfig::default(), vec![0.0, 2.0, 4.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert_eq!(e.histogram.counts, vec![1, 1]);
        assert_eq!(e.excluded, 0);
    }

    #[test]
    fn dataset_failures_are_excluded() {
        let ds = LabeledDataset::new("two", vec![centre(1), Tensor::vector(vec![0.2])], vec![0, 1], 2).unwrap();
        let metric = |x: &Tensor, _: usize, _: &McConfig| {
            if x.data()[0] == 0.5 {
                Ok(1.0)
            } else {
                Err(Error::NonFinite("stub".into()))
            }
        };
        let e = dataset_expectation(&ds, metric, &McConfig::default(), vec![0.0, 2.0]).unwrap();
        assert_eq!((e.mean, e.count, e.excluded), (1.0, 1, 1));
    }

    #[test]
    fn dataset_metrics_cover_every_example() {
        let xs: Vec<Tensor> = (0..6).map(|i| Tensor::vector(vec![0.2 + 0.1 * i as f64, 0.5])).collect();
        let ds = LabeledDataset::new("a", xs, vec![0; 6], 1).unwrap();
        let edges = HistogramEdges::for_ball(0.1, 2, 10).unwrap();
        let m = dataset_metrics(&ds, &Identity(0.1), &McConfig::new(30, 0), &edges).unwrap();
        assert_eq!(m.dispersion.count, 6);
        assert_eq!(m.dispersion.histogram.total(), 6);
        assert!(m.angle.mean > 0.0);
    }

    #[test]
    fn histogram_edges_and_overflow() {
        let mut h = Histogram::linear(0.0, 1.0, 4).unwrap();
        for v in [-0.1, 0.0, 0.25, 0.99, 1.0, 1.5] {
            h.add(v);
        }
        assert_eq!(h.counts, vec![1, 1, 0, 2]);
        assert_eq!((h.underflow, h.overflow), (1, 1));
        assert!(Histogram::with_edges(vec![0.0, 0.0]).is_err());
    }
}
