//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    /// `v = momentum * v + g; p -= lr * v`, with `g` including weight decay.
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Bias-corrected adaptive moments.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd {
            momentum: default_momentum(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerKind {
    pub fn plain_sgd() -> Self {
        OptimizerKind::Sgd {
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Sgd { momentum, weight_decay } => (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 && weight_decay >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state for one parameter store.
#[derive(Debug)]
pub struct Optimizer<T: Element> {
    kind: OptimizerKind,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: i32,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, store: &ParamStore<T>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
        let second = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &ParamStore<T>, lr: f64) {
        self.steps += 1;
        let c = |v: f64| T::from_f64(v).unwrap();
        let lr_t = c(lr);
        for (i, p) in store.params().iter().enumerate() {
            let Some(grad) = p.value.grad() else { continue };
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let (mu, wd) = (c(momentum), c(weight_decay));
                    p.value.update_data(|w| {
                        for ((w, &g), v) in w.iter_mut().zip(&grad).zip(m.iter_mut()) {
                            let g = g + wd * *w;
                            *v = mu * *v + g;
                            *w = *w - lr_t * *v;
                        }
                    });
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let (b1, b2, e, wd) = (c(beta1), c(beta2), c(eps), c(weight_decay));
                    let bc1 = T::one() - b1.powi(self.steps);
                    let bc2 = T::one() - b2.powi(self.steps);
                    let s = &mut self.second[i];
                    p.value.update_data(|w| {
                        for (((w, &g), m), s) in w.iter_mut().zip(&grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                            let g = g + wd * *w;
                            *m = b1 * *m + (T::one() - b1) * g;
                            *s = b2 * *s + (T::one() - b2) * g * g;
                            let m_hat = *m / bc1;
                            let s_hat = *s / bc2;
                            *w = *w - lr_t * m_hat / (s_hat.sqrt() + e);
                        }
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ops, Tensor};

    fn quadratic(store: &mut ParamStore<f64>) -> Tensor<f64> {
        store.add("w", Tensor::parameter(vec![1.0, -2.0], &[2]).unwrap()).unwrap()
    }

    #[test]
    fn plain_sgd_is_a_gradient_step() {
        let mut store = ParamStore::new();
        let w = quadratic(&mut store);
        ops::sum(&ops::mul_broadcast(&w, &w).unwrap()).backward().unwrap();
        let mut opt = Optimizer::new(OptimizerKind::plain_sgd(), &store);
        opt.step(&store, 0.1);
        assert_eq!(w.to_vec(), vec![1.0 - 0.1 * 2.0, -2.0 - 0.1 * -4.0]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        let w = quadratic(&mut store);
        let mut opt = Optimizer::new(OptimizerKind::default(), &store);
        // Constant gradient g = 1 per coordinate: steps of lr, then lr * 1.9.
        ops::sum(&w).backward().unwrap();
        opt.step(&store, 0.5);
        opt.step(&store, 0.5);
        assert_eq!(w.to_vec(), vec![1.0 - 0.5 - 0.95, -2.0 - 0.5 - 0.95]);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let mut store = ParamStore::new();
        let w = quadratic(&mut store);
        ops::sum(&ops::mul_broadcast(&w, &w).unwrap()).backward().unwrap();
        let kind = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = Optimizer::new(kind, &store);
        opt.step(&store, 0.01);
        let got = w.to_vec();
        assert!((got[0] - 0.99).abs() < 1e-8 && (got[1] + 1.99).abs() < 1e-8, "{got:?}");
    }

    #[test]
    fn zero_rate_leaves_parameters_unchanged() {
        let mut store = ParamStore::new();
        let w = quadratic(&mut store);
        ops::sum(&w).backward().unwrap();
        Optimizer::new(OptimizerKind::default(), &store).step(&store, 0.0);
        assert_eq!(w.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn settings_validation() {
        assert!(OptimizerKind::Sgd {
            momentum: 1.0,
            weight_decay: 0.0
        }
        .validate()
        .is_err());
        let parsed: OptimizerKind = serde_json::from_str(r#"{"kind":"sgd"}"#).unwrap();
        assert_eq!(parsed, OptimizerKind::default());
        assert!(serde_json::from_str::<OptimizerKind>(r#"{"kind":"sgd","momentun":0.5}"#).is_err());
    }
}
