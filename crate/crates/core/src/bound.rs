//! Numeric evaluation of the dispersion-based generalisation bound and
//! empirical proxies for its constants.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig, InputLoss};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::Params;
use crate::seeds;
use crate::tensor::{l2_distance, Tensor};
use crate::training;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Lipschitz constant of the loss in its input.
    pub beta: f64,
    /// Upper bound on the loss.
    pub loss_bound: f64,
    pub dim: usize,
    pub epsilon: f64,
    /// Number of training examples.
    pub m: usize,
    /// Expected local dispersion.
    pub eld: f64,
    /// Failure probability.
    pub tau: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidConfig(format!("{what} must be finite and >= 0, got {v}")));
        for (what, v) in [
            ("beta", self.beta),
            ("loss bound", self.loss_bound),
            ("epsilon", self.epsilon),
            ("eld", self.eld),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(what, v);
            }
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be positive".into()));
        }
        if self.dim == 0 {
            return Err(Error::InvalidConfig("dimension must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// `(2β/√m)·√eld + 2β·√d·ε/√m + (2B/√m)·(√(ln(1/τ)/2) + 1)`.
pub fn theorem_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let sm = (b.m as f64).sqrt();
    let dispersion = 2.0 * b.beta / sm * b.eld.sqrt();
    let radius = 2.0 * b.beta * (b.dim as f64).sqrt() * b.epsilon / sm;
    let confidence = 2.0 * b.loss_bound / sm * (((1.0 / b.tau).ln() / 2.0).sqrt() + 1.0);
    Ok(dispersion + radius + confidence)
}

/// Absolute difference of the mean cross-entropy of `phi` on the two induced sets.
pub fn empirical_gg(phi: &Params, induced_train: &LabeledDataset, induced_test: &LabeledDataset) -> Result<f64> {
    let tr = training::eval_errors(phi, induced_train, None, 0)?.mean_loss;
    let te = training::eval_errors(phi, induced_test, None, 0)?.mean_loss;
    Ok((tr - te).abs())
}

/// Empirical estimates of the loss constants. Both are lower bounds on the
/// true constants since they are maxima over finitely many observed points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConstants {
    pub beta_hat: f64,
    pub loss_bound_hat: f64,
}

/// Scans each example's ε-ball: the clean point, its PGD image under `loss`
/// and `pairs_per_example` random pairs. `beta_hat` is the largest observed
/// ratio `|ℓ(u) − ℓ(v)| / ‖u − v‖₂`, `loss_bound_hat` the largest loss seen.
pub fn estimate_beta_b(
    loss: &impl InputLoss,
    ds: &LabeledDataset,
    atk: &AttackConfig,
    pairs_per_example: usize,
    seed: u64,
) -> Result<LossConstants> {
    atk.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let eps = atk.epsilon;
    let mut beta_hat: f64 = 0.0;
    let mut b_hat = f64::NEG_INFINITY;
    for i in 0..ds.len() {
        let (x, y) = ds.example(i);
        let mut rng = seeds::derived_rng(seed, &["constants"], i as u64);
        let adv = attack::attack_batch(&Tensor::stack(&[x])?, &[y], loss, atk, &mut rng)?;
        let mut pts: Vec<Tensor> = vec![x.clone(), adv.row_tensor(0)];
        for _ in 0..2 * pairs_per_example {
            let v: Vec<f64> = x
                .data()
                .iter()
                .map(|&xi| {
                    let r = if eps > 0.0 { rng.random_range(-eps..=eps) } else { 0.0 };
                    (xi + r).clamp(0.0, 1.0)
                })
                .collect();
            pts.push(Tensor::new(x.shape().to_vec(), v)?);
        }
        let refs: Vec<&Tensor> = pts.iter().collect();
        let batch = Tensor::stack(&refs)?;
        let ls = loss.losses(&batch, &vec![y; pts.len()])?;
        if ls.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("loss at example {i}")));
        }
        b_hat = ls.iter().copied().fold(b_hat, f64::max);
        let mut consider = |a: usize, b: usize| {
            let dist = l2_distance(batch.row(a), batch.row(b));
            if dist > 0.0 {
                beta_hat = beta_hat.max((ls[a] - ls[b]).abs() / dist);
            }
        };
        consider(0, 1);
        for k in 0..pairs_per_example {
            consider(2 + 2 * k, 3 + 2 * k);
        }
    }
    Ok(LossConstants {
        beta_hat,
        loss_bound_hat: b_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::stubs::{ConstantLoss, LinearLoss};

    fn reference() -> BoundInputs {
        BoundInputs {
            beta: 1.0,
            loss_bound: 1.0,
            dim: 4,
            epsilon: 0.1,
            m: 100,
            eld: 0.01,
            tau: 0.05,
        }
    }

    #[test]
    fn reference_value() {
        let v = theorem_bound(&reference()).unwrap();
        let sm = 10.0;
        let oracle = 2.0 / sm * 0.1 + 2.0 * 2.0 * 0.1 / sm + 2.0 / sm * ((20f64.ln() / 2.0).sqrt() + 1.0);
        assert!((v - oracle).abs() <= 1e-12);
        assert!((v - 0.5047746830680817).abs() / v <= 1e-6);
        assert_eq!((v * 1e5).round() / 1e5, 0.50477);
    }

    #[test]
    fn scales_as_inverse_root_m() {
        let small = theorem_bound(&BoundInputs { m: 10_000, ..reference() }).unwrap();
        let large = theorem_bound(&BoundInputs { m: 1_000_000, ..reference() }).unwrap();
        assert!((large - small / 10.0).abs() <= 1e-15 * small);
    }

    #[test]
    fn zero_dispersion_and_radius_leave_confidence_term() {
        let b = BoundInputs {
            eld: 0.0,
            epsilon: 0.0,
            ..reference()
        };
        let expect = 2.0 / 10.0 * ((20f64.ln() / 2.0).sqrt() + 1.0);
        assert!((theorem_bound(&b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn monotone_in_each_argument() {
        let base = reference();
        let grid = [0.5, 1.0, 2.0, 4.0];
        let eval = |f: &dyn Fn(f64) -> BoundInputs| -> Vec<f64> { grid.iter().map(|&s| theorem_bound(&f(s)).unwrap()).collect() };
        let up = |v: Vec<f64>| v.windows(2).all(|w| w[0] <= w[1]);
        let down = |v: Vec<f64>| v.windows(2).all(|w| w[0] >= w[1]);
        assert!(up(eval(&|s| BoundInputs { eld: base.eld * s, ..base })));
        assert!(up(eval(&|s| BoundInputs { beta: base.beta * s, ..base })));
        assert!(up(eval(&|s| BoundInputs { loss_bound: base.loss_bound * s, ..base })));
        assert!(up(eval(&|s| BoundInputs { epsilon: base.epsilon * s, ..base })));
        assert!(up(eval(&|s| BoundInputs { dim: (base.dim as f64 * s) as usize, ..base })));
        assert!(down(eval(&|s| BoundInputs { m: (base.m as f64 * s) as usize, ..base })));
        assert!(down(eval(&|s| BoundInputs { tau: base.tau * s / 4.0, ..base })));
    }

    #[test]
    fn invalid_inputs_rejected() {
        for b in [
            BoundInputs { tau: 0.0, ..reference() },
            BoundInputs { tau: 1.0, ..reference() },
            BoundInputs { m: 0, ..reference() },
            BoundInputs { eld: -1.0, ..reference() },
            BoundInputs { beta: f64::NAN, ..reference() },
        ] {
            assert!(matches!(theorem_bound(&b), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn gg_of_identical_sets_is_zero() {
        let spec = crate::models::ModelSpec::mlp(vec![2, 4, 2]);
        let phi = crate::models::init(&spec, 3).unwrap();
        assert_eq!(empirical_gg(&phi, &grid_ds(), &grid_ds()).unwrap(), 0.0);
        let empty = grid_ds().take(0);
        assert!(empirical_gg(&phi, &grid_ds(), &empty).is_err());
    }

    #[test]
    fn loss_bound_dominates_observed_losses() {
        let spec = crate::models::ModelSpec::mlp(vec![2, 4, 2]);
        let phi = crate::models::init(&spec, 3).unwrap();
        let ds = grid_ds();
        let c = estimate_beta_b(&phi, &ds, &AttackConfig::new(0.1, 0.05, 3), 10, 0).unwrap();
        for l in phi.losses(&Tensor::stack(&ds.inputs().iter().collect::<Vec<_>>()).unwrap(), ds.labels()).unwrap() {
            assert!(c.loss_bound_hat >= l);
        }
        assert!(c.beta_hat > 0.0);
    }

    fn grid_ds() -> LabeledDataset {
        let xs = vec![Tensor::vector(vec![0.3, 0.6]), Tensor::vector(vec![0.5, 0.5])];
        LabeledDataset::new("g", xs, vec![0, 1], 2).unwrap()
    }

    #[test]
    fn constants_of_constant_loss() {
        let c = estimate_beta_b(&ConstantLoss(0.7), &grid_ds(), &AttackConfig::new(0.1, 0.05, 3), 20, 0).unwrap();
        assert_eq!(c.beta_hat, 0.0);
        assert_eq!(c.loss_bound_hat, 0.7);
    }

    #[test]
    fn constants_of_linear_loss_bounded_by_gradient_norm() {
        let w = vec![3.0, 4.0];
        let c = estimate_beta_b(&LinearLoss(w), &grid_ds(), &AttackConfig::new(0.1, 0.05, 3), 200, 1).unwrap();
        assert!(c.beta_hat <= 5.0 + 1e-12);
        assert!(c.beta_hat > 4.0, "{c:?}");
    }
}
