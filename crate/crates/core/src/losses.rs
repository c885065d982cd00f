//! Multi-label losses on raw logits, reduced by the mean over all `N*L`
//! elements.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, sigmoid_scalar};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    #[serde(default = "FocalParams::default_alpha")]
    pub alpha: f64,
    #[serde(default = "FocalParams::default_gamma")]
    pub gamma: f64,
}

impl FocalParams {
    fn default_alpha() -> f64 {
        0.25
    }

    fn default_gamma() -> f64 {
        2.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("focal alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("focal gamma {} must be finite and >= 0", self.gamma)));
        }
        Ok(())
    }
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: Self::default_alpha(),
            gamma: Self::default_gamma(),
        }
    }
}

/// `-log(sigmoid(s))`, stable for any `s`.
fn neg_log_sigmoid<T: Element>(s: T) -> T {
    (-s).max(T::zero()) + (-s.abs()).exp().ln_1p()
}

/// Per-element binary cross-entropy on logit `z` and target `y`:
/// `max(z, 0) - z*y + log(1 + exp(-|z|))`.
pub fn bce_element<T: Element>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Per-element focal loss `alpha * (1 - p_t)^gamma * -log(p_t)`.
pub fn focal_element<T: Element>(z: T, y: T, p: &FocalParams) -> T {
    let s = if y == T::one() { z } else { -z };
    let alpha = T::from_f64(p.alpha).unwrap();
    let gamma = T::from_f64(p.gamma).unwrap();
    alpha * modulating(s, gamma) * neg_log_sigmoid(s)
}

/// `(1 - sigmoid(s))^gamma`, exactly 1 for `gamma = 0`.
fn modulating<T: Element>(s: T, gamma: T) -> T {
    if gamma == T::zero() {
        T::one()
    } else {
        sigmoid_scalar(-s).powf(gamma)
    }
}

fn check_targets<T: Element>(op: &'static str, logits: &Tensor<T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() || logits.shape().len() != 2 {
        return Err(Error::shape(
            op,
            format!("logits {:?} and targets {:?} must be equal [N, L]", logits.shape(), targets.shape()),
        ));
    }
    if let Some((i, v)) = targets
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != T::zero() && v != T::one())
    {
        return Err(Error::invalid(op, format!("target {v} at flat index {i} is not 0 or 1")));
    }
    Ok(())
}

/// Mean binary cross-entropy with logits. Differentiable in `logits`.
pub fn bce_with_logits<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
    check_targets("bce_with_logits", logits, targets)?;
    let z = logits.data();
    let y = targets.data();
    let count = T::from_usize(z.len()).unwrap();
    let total: T = z.iter().zip(y.iter()).map(|(&z, &y)| bce_element(z, y)).sum();
    let grad: Vec<T> = z
        .iter()
        .zip(y.iter())
        .map(|(&z, &y)| (sigmoid_scalar(z) - y) / count)
        .collect();
    Ok(Tensor::from_op(vec![total / count], vec![], "bce_with_logits", vec![logits.clone()], move |g, _| {
        vec![Some(grad.iter().map(|&d| d * g[0]).collect())]
    }))
}

/// Mean focal loss. Differentiable in `logits`, including through the
/// modulating factor.
pub fn focal_loss<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>, p: &FocalParams) -> Result<Tensor<T>> {
    p.validate()?;
    check_targets("focal_loss", logits, targets)?;
    let z = logits.data();
    let y = targets.data();
    let count = T::from_usize(z.len()).unwrap();
    let alpha = T::from_f64(p.alpha).unwrap();
    let gamma = T::from_f64(p.gamma).unwrap();
    let total: T = z.iter().zip(y.iter()).map(|(&z, &y)| focal_element(z, y, p)).sum();
    // With s = ±z and q = 1 - sigmoid(s):
    // dL/ds = -alpha * q^gamma * (gamma * (1 - q) * ce + q).
    let grad: Vec<T> = z
        .iter()
        .zip(y.iter())
        .map(|(&z, &y)| {
            let sign = if y == T::one() { T::one() } else { -T::one() };
            let s = sign * z;
            let q = sigmoid_scalar(-s);
            let ce = neg_log_sigmoid(s);
            let ds = -alpha * modulating(s, gamma) * (gamma * sigmoid_scalar(s) * ce + q);
            sign * ds / count
        })
        .collect();
    Ok(Tensor::from_op(vec![total / count], vec![], "focal_loss", vec![logits.clone()], move |g, _| {
        vec![Some(grad.iter().map(|&d| d * g[0]).collect())]
    }))
}

/// A concrete loss used for one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossKind {
    Bce,
    Focal {
        #[serde(default = "FocalParams::default_alpha")]
        alpha: f64,
        #[serde(default = "FocalParams::default_gamma")]
        gamma: f64,
    },
    /// `lambda * bce + focal` in a single objective.
    Summed {
        lambda: f64,
        #[serde(default = "FocalParams::default_alpha")]
        alpha: f64,
        #[serde(default = "FocalParams::default_gamma")]
        gamma: f64,
    },
}

impl LossKind {
    pub fn focal() -> Self {
        let FocalParams { alpha, gamma } = FocalParams::default();
        LossKind::Focal { alpha, gamma }
    }

    /// Focal parameters of the focal and summed kinds.
    pub fn focal_params(&self) -> Option<FocalParams> {
        match *self {
            LossKind::Bce => None,
            LossKind::Focal { alpha, gamma } | LossKind::Summed { alpha, gamma, .. } => {
                Some(FocalParams { alpha, gamma })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::Summed { lambda, .. } = *self {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::Config(format!("summed-loss lambda {lambda} must be finite and >= 0")));
            }
        }
        self.focal_params().map_or(Ok(()), |p| p.validate())
    }

    pub fn apply<T: Element>(&self, logits: &Tensor<T>, targets: &Tensor<T>) -> Result<Tensor<T>> {
        match *self {
            LossKind::Bce => bce_with_logits(logits, targets),
            LossKind::Focal { alpha, gamma } => focal_loss(logits, targets, &FocalParams { alpha, gamma }),
            LossKind::Summed { lambda, alpha, gamma } => {
                let bce = ops::scale(&bce_with_logits(logits, targets)?, T::from_f64(lambda).unwrap());
                ops::add(&bce, &focal_loss(logits, targets, &FocalParams { alpha, gamma })?)
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
            LossKind::Summed { .. } => "bce+focal-summed",
        }
    }
}

/// Loss selection for a whole training plan: one loss for every stage, or
/// a list with one entry per stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LossPlan {
    Uniform(LossKind),
    Staged(Vec<LossKind>),
}

impl LossPlan {
    /// Stage 1 BCE, stage 2 focal.
    pub fn bce_then_focal() -> Self {
        LossPlan::Staged(vec![LossKind::Bce, LossKind::focal()])
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        match self {
            LossPlan::Uniform(k) => k.validate(),
            LossPlan::Staged(staged) => {
                if staged.len() != stages {
                    return Err(Error::Config(format!(
                        "staged loss lists {} entries for {stages} training stages",
                        staged.len()
                    )));
                }
                staged.iter().try_for_each(LossKind::validate)
            }
        }
    }

    /// The loss for 1-based `stage`.
    pub fn resolve(&self, stage: usize) -> Result<LossKind> {
        let out_of_range = |len: usize| Error::invalid("resolve_plan", format!("stage {stage} outside 1..={len}"));
        match self {
            LossPlan::Uniform(k) if stage >= 1 => Ok(*k),
            LossPlan::Uniform(_) => Err(out_of_range(usize::MAX)),
            LossPlan::Staged(staged) => stage
                .checked_sub(1)
                .and_then(|i| staged.get(i))
                .copied()
                .ok_or_else(|| out_of_range(staged.len())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(data: Vec<f64>, n: usize, l: usize) -> Tensor<f64> {
        Tensor::parameter(data, &[n, l]).unwrap()
    }

    fn sigmoid_inv(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn bce_examples() {
        let ln2 = std::f64::consts::LN_2;
        let l = bce_with_logits(&t(vec![0.0], 1, 1), &t(vec![1.0], 1, 1)).unwrap();
        assert!((l.item() - ln2).abs() < 1e-15);
        assert!(bce_element(20.0, 1.0) < 1e-8);
        let l = bce_with_logits(&t(vec![0.0; 6], 2, 3), &t(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], 2, 3)).unwrap();
        assert!((l.item() - ln2).abs() < 1e-15);
    }

    #[test]
    fn focal_examples() {
        let p = FocalParams::default();
        let at = |prob: f64| focal_element(sigmoid_inv(prob), 1.0, &p);
        let expected = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((at(0.9) - expected).abs() < 1e-15);
        assert!((at(0.9) - 2.634e-4).abs() < 1e-7);
        assert!((at(0.5) - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((at(0.5) - 4.332e-2).abs() < 1e-5);
    }

    #[test]
    fn focal_with_unit_alpha_and_zero_gamma_is_bce() {
        let p = FocalParams { alpha: 1.0, gamma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let z: f64 = rng.random_range(-30.0..30.0);
            let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            assert!((focal_element(z, y, &p) - bce_element(z, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_must_be_binary() {
        let err = bce_with_logits(&t(vec![0.0, 1.0], 1, 2), &t(vec![1.0, 0.5], 1, 2)).unwrap_err();
        assert!(err.to_string().contains("flat index 1"), "{err}");
        assert!(focal_loss(&t(vec![0.0], 1, 1), &t(vec![2.0], 1, 1), &FocalParams::default()).is_err());
        assert!(bce_with_logits(&t(vec![0.0], 1, 1), &t(vec![0.0, 1.0], 1, 2)).is_err());
    }

    #[test]
    fn stable_on_extreme_logits() {
        let p = FocalParams::default();
        for z in [-50.0, -20.0, -1e-3, 0.0, 1e-3, 20.0, 50.0] {
            for y in [0.0, 1.0] {
                let logits = t(vec![z], 1, 1);
                let targets = t(vec![y], 1, 1);
                for loss in [
                    bce_with_logits(&logits, &targets).unwrap(),
                    focal_loss(&logits, &targets, &p).unwrap(),
                ] {
                    assert!(loss.item().is_finite());
                    logits.zero_grad();
                    loss.backward().unwrap();
                    assert!(logits.grad_or_zeros()[0].is_finite());
                }
            }
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, l) = (4, 3);
        let z: Vec<f64> = (0..n * l).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<f64> = (0..n * l).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let targets = t(y, n, l);
        let kinds = [
            LossKind::Bce,
            LossKind::focal(),
            LossKind::Focal { alpha: 0.7, gamma: 0.5 },
            LossKind::Summed {
                lambda: 0.5,
                alpha: 0.25,
                gamma: 2.0,
            },
        ];
        for kind in kinds {
            let logits = t(z.clone(), n, l);
            kind.apply(&logits, &targets).unwrap().backward().unwrap();
            let analytic = logits.grad_or_zeros();
            let h = 1e-6;
            let y = targets.to_vec();
            for i in 0..z.len() {
                // Each element contributes independently to the mean, so the
                // difference quotient is taken on that element alone.
                let eval = |d: f64| {
                    let target = t(vec![y[i]], 1, 1);
                    kind.apply(&t(vec![z[i] + d], 1, 1), &target).unwrap().item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h) / (n * l) as f64;
                let rel = (analytic[i] - numeric).abs() / f64::max(1e-8, analytic[i].abs() + numeric.abs());
                assert!(rel < 1e-6, "{kind:?} coord {i}: {} vs {numeric} ({rel})", analytic[i]);
            }
        }
    }

    #[test]
    fn plan_resolution() {
        let staged = LossPlan::bce_then_focal();
        assert_eq!(staged.resolve(1).unwrap(), LossKind::Bce);
        assert_eq!(staged.resolve(2).unwrap(), LossKind::focal());
        assert!(staged.resolve(3).is_err());
        assert!(staged.resolve(0).is_err());
        let bce = LossPlan::Uniform(LossKind::Bce);
        assert_eq!(bce.resolve(1).unwrap(), LossKind::Bce);
        assert_eq!(bce.resolve(2).unwrap(), LossKind::Bce);
        assert!(staged.validate(2).is_ok());
        assert!(staged.validate(1).is_err());
    }

    #[test]
    fn plan_serde_shapes() {
        let plan: LossPlan = serde_json::from_str(r#"{"kind":"focal","gamma":1.0}"#).unwrap();
        assert_eq!(
            plan,
            LossPlan::Uniform(LossKind::Focal { alpha: 0.25, gamma: 1.0 })
        );
        let plan: LossPlan = serde_json::from_str(r#"[{"kind":"bce"},{"kind":"focal"}]"#).unwrap();
        assert_eq!(plan, LossPlan::bce_then_focal());
        assert!(serde_json::from_str::<LossPlan>(r#"{"kind":"focal","gama":1.0}"#).is_err());
        assert!(serde_json::from_str::<LossPlan>(r#"{"kind":"hinge"}"#).is_err());
        assert!(FocalParams { alpha: 0.0, gamma: 2.0 }.validate().is_err());
        assert!(FocalParams { alpha: 0.5, gamma: -1.0 }.validate().is_err());
    }
}
