//! ℓ∞ projected-gradient attacks.
//!
//! The one-step map is `A(x') = Π[x' + λ·sgn(∇_{x'} loss(x', y))]` where `Π`
//! clamps into the ε-ball around the anchor `x` and then into the `[0, 1]`
//! data box. The k-step operator `Q` is the k-fold composition of `A`.
//! Everything here works on batches: row `i` of a batch is attacked against
//! anchor row `i` and label `ys[i]`, independently of the other rows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Params;
use crate::seeds::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Start at the clean point, `x0 = x`.
    #[default]
    AtCenter,
    /// Start at `x + U(-ε, ε)^d`, projected into the box.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Step size λ.
    pub step_size: f64,
    /// Number of steps k.
    pub steps: usize,
    #[serde(default)]
    pub init: Init,
}

impl AttackConfig {
    pub fn new(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            init: Init::AtCenter,
        }
    }

    /// MNIST PGD-AT attack: ε = 0.3, λ = 0.01, 40 steps.
    pub fn mnist() -> Self {
        Self::new(0.3, 0.01, 40)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step size must be > 0 when steps > 0, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

/// A loss that can be evaluated and differentiated with respect to its input.
pub trait InputLoss: Sync {
    /// Per-example losses for the batch `xs` (leading axis = example).
    fn losses(&self, xs: &Tensor, ys: &[usize]) -> Result<Vec<f64>>;
    /// Per-example losses and the per-example input gradients.
    fn losses_and_input_grad(&self, xs: &Tensor, ys: &[usize]) -> Result<(Vec<f64>, Tensor)>;
}

impl InputLoss for Params {
    fn losses(&self, xs: &Tensor, ys: &[usize]) -> Result<Vec<f64>> {
        Params::losses(self, xs, ys)
    }

    fn losses_and_input_grad(&self, xs: &Tensor, ys: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        Params::losses_and_input_grad(self, xs, ys)
    }
}

#[inline]
fn project_coord(v: f64, x: f64, eps: f64) -> f64 {
    v.max(x - eps).min(x + eps).clamp(0.0, 1.0)
}

fn project_slice(v: &mut [f64], x: &[f64], eps: f64) {
    for (vi, &xi) in v.iter_mut().zip(x) {
        *vi = project_coord(*vi, xi, eps);
    }
}

/// Coordinatewise clamp of `v` into `[x - ε, x + ε] ∩ [0, 1]`.
pub fn project_linf(v: &Tensor, x: &Tensor, epsilon: f64) -> Result<Tensor> {
    if v.shape() != x.shape() {
        return Err(Error::shape("project_linf", x.shape(), v.shape()));
    }
    let mut out = v.clone();
    project_slice(out.data_mut(), x.data(), epsilon);
    Ok(out)
}

#[inline]
fn sgn(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(cur: &Tensor, anchors: &Tensor, ys: &[usize]) -> Result<()> {
    if cur.shape() != anchors.shape() {
        return Err(Error::shape("attack anchors", cur.shape(), anchors.shape()));
    }
    if ys.len() != cur.rows() {
        return Err(Error::shape("attack labels", &[cur.rows()], &[ys.len()]));
    }
    Ok(())
}

/// One PGD step for every row of `cur`.
pub fn pgd_step_batch(
    cur: &Tensor,
    anchors: &Tensor,
    ys: &[usize],
    loss: &impl InputLoss,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    check_batch(cur, anchors, ys)?;
    let (_, grad) = loss.losses_and_input_grad(cur, ys)?;
    if let Some(pos) = grad.data().iter().position(|g| !g.is_finite()) {
        let row = pos / cur.row_len().max(1);
        return Err(Error::NonFinite(format!(
            "input gradient at example {row}, coordinate {}",
            pos % cur.row_len().max(1)
        )));
    }
    let mut next = cur.clone();
    for ((v, g), &x) in next.data_mut().iter_mut().zip(grad.data()).zip(anchors.data()) {
        *v = project_coord(*v + cfg.step_size * sgn(*g), x, cfg.epsilon);
    }
    Ok(next)
}

/// `Π[x_cur + λ·sgn(∇ loss(x_cur, y))]` for a single example.
pub fn pgd_step(
    x_cur: &Tensor,
    x: &Tensor,
    y: usize,
    loss: &impl InputLoss,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let out = pgd_step_batch(&as_batch(x_cur), &as_batch(x), &[y], loss, cfg)?;
    Ok(out.row_tensor(0))
}

/// k-fold composition of the PGD step starting at each row of `starts`.
/// With `k = 0` the projected start is returned.
pub fn pgd_k_batch(
    starts: &Tensor,
    anchors: &Tensor,
    ys: &[usize],
    loss: &impl InputLoss,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(starts, anchors, ys)?;
    let mut cur = starts.clone();
    project_slice(cur.data_mut(), anchors.data(), cfg.epsilon);
    if cfg.epsilon == 0.0 {
        // The ball is a single point; no gradient can move it.
        return Ok(cur);
    }
    for _ in 0..cfg.steps {
        cur = pgd_step_batch(&cur, anchors, ys, loss, cfg)?;
    }
    Ok(cur)
}

pub fn pgd_k(x0: &Tensor, x: &Tensor, y: usize, loss: &impl InputLoss, cfg: &AttackConfig) -> Result<Tensor> {
    Ok(pgd_k_batch(&as_batch(x0), &as_batch(x), &[y], loss, cfg)?.row_tensor(0))
}

/// Start points for `anchors` under `cfg.init`. Uniform starts draw one
/// `U(-ε, ε)` per coordinate from `rng`, in row-major order.
pub fn start_points(anchors: &Tensor, cfg: &AttackConfig, rng: &mut Rng) -> Tensor {
    let mut s = anchors.clone();
    if cfg.init == Init::UniformRandom && cfg.epsilon > 0.0 {
        for (v, &x) in s.data_mut().iter_mut().zip(anchors.data()) {
            *v = project_coord(x + rng.random_range(-cfg.epsilon..=cfg.epsilon), x, cfg.epsilon);
        }
    }
    s
}

/// Full attack: start points per `cfg.init`, then `k` PGD steps.
pub fn attack_batch(
    anchors: &Tensor,
    ys: &[usize],
    loss: &impl InputLoss,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<Tensor> {
    let starts = start_points(anchors, cfg, rng);
    pgd_k_batch(&starts, anchors, ys, loss, cfg)
}

/// Largest grid the brute-force oracle will enumerate.
pub const GRID_CAP: f64 = 1e7;

/// Exhaustive maximisation of the loss over a `grid_n^d` lattice covering
/// `B(x, ε) ∩ [0, 1]^d`, endpoints (and so every corner) included. The first
/// maximiser in lexicographic grid order wins ties. Intended as a test oracle.
pub fn brute_force_inner_max(
    x: &Tensor,
    y: usize,
    loss: &impl InputLoss,
    epsilon: f64,
    grid_n: usize,
) -> Result<(Tensor, f64)> {
    let d = x.len();
    let points = (grid_n as f64).powi(d as i32);
    if points > GRID_CAP {
        return Err(Error::GridCapExceeded { points, cap: GRID_CAP });
    }
    if grid_n < 2 {
        return Err(Error::InvalidConfig("brute-force grid needs at least 2 points per axis".into()));
    }
    let axes: Vec<Vec<f64>> = x
        .data()
        .iter()
        .map(|&xi| {
            let lo = project_coord(xi - epsilon, xi, epsilon);
            let hi = project_coord(xi + epsilon, xi, epsilon);
            (0..grid_n)
                .map(|j| match j {
                    0 => lo,
                    j if j == grid_n - 1 => hi,
                    j => lo + (hi - lo) * j as f64 / (grid_n - 1) as f64,
                })
                .collect()
        })
        .collect();

    let total = points as usize;
    const CHUNK: usize = 4096;
    let mut best: Option<(usize, f64)> = None;
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        let mut data = Vec::with_capacity((end - start) * d);
        for flat in start..end {
            data.extend(grid_point(flat, &axes, grid_n));
        }
        let mut shape = vec![end - start];
        shape.extend_from_slice(x.shape());
        let batch = Tensor::new(shape, data)?;
        let losses = loss.losses(&batch, &vec![y; end - start])?;
        for (i, l) in losses.into_iter().enumerate() {
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((start + i, l));
            }
        }
        start = end;
    }
    let (idx, value) = best.expect("grid is non-empty");
    let v = Tensor::new(x.shape().to_vec(), grid_point(idx, &axes, grid_n).collect())?;
    Ok((v, value))
}

fn grid_point<'a>(mut flat: usize, axes: &'a [Vec<f64>], grid_n: usize) -> impl Iterator<Item = f64> + 'a {
    let d = axes.len();
    let mut idx = vec![0; d];
    for slot in idx.iter_mut().rev() {
        *slot = flat % grid_n;
        flat /= grid_n;
    }
    axes.iter().zip(idx).map(|(a, i)| a[i])
}

fn as_batch(x: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Tensor::new(shape, x.data().to_vec()).expect("single-row batch")
}

/// A perturbation operator `v ↦ Q_{x,y}(v)` for a fixed anchor and label.
pub trait Perturbation: Sync {
    /// Radius of the ℓ∞ ball the operator's start points are drawn from.
    fn epsilon(&self) -> f64;
    /// Applies the operator to each row of `starts`, all anchored at `(x, y)`.
    fn apply(&self, starts: &Tensor, x: &Tensor, y: usize) -> Result<Tensor>;
}

/// The k-step PGD map of a model, applied from the given start points.
pub struct PgdOperator<'a, L: InputLoss> {
    pub loss: &'a L,
    pub cfg: AttackConfig,
}

impl<'a, L: InputLoss> PgdOperator<'a, L> {
    pub fn new(loss: &'a L, cfg: AttackConfig) -> Self {
        Self { loss, cfg }
    }
}

impl<L: InputLoss> Perturbation for PgdOperator<'_, L> {
    fn epsilon(&self) -> f64 {
        self.cfg.epsilon
    }

    fn apply(&self, starts: &Tensor, x: &Tensor, y: usize) -> Result<Tensor> {
        let n = starts.rows();
        let anchors = Tensor::new(starts.shape().to_vec(), x.data().repeat(n))?;
        pgd_k_batch(starts, &anchors, &vec![y; n], self.loss, &self.cfg)
    }
}
