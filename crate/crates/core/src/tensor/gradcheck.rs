//! Central finite-difference verification of tape gradients.
//!
//! Only available for `f64` tensors. Coordinates whose `+h` or `-h`
//! evaluation lands on a different smooth piece than the unperturbed
//! point (a relu sign flip or a max-pool argmax change) are reported as
//! excluded rather than compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{with_branch_trace, Tensor};
use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter (all, for smaller tensors).
    pub coords_per_param: usize,
    /// Lower bound on the total number of sampled coordinates.
    pub min_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_param: 4,
            min_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CoordinateCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: Vec<CoordinateCheck>,
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked.len()).sum()
    }

    pub fn excluded(&self) -> usize {
        self.params.iter().map(|p| p.excluded.len()).sum()
    }

    /// Coordinates whose relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<(&str, &CoordinateCheck)> {
        self.params
            .iter()
            .flat_map(|p| p.checked.iter().map(move |c| (p.name.as_str(), c)))
            .filter(|(_, c)| c.rel_error >= self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.checked() > 0 && self.failures().is_empty()
    }
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-8, a.abs() + b.abs())
}

/// Compares tape gradients of `loss` with respect to every parameter in
/// `params` against central differences at a seeded sample of coordinates.
pub fn grad_check(
    params: &ParamStore<f64>,
    mut loss: impl FnMut() -> Result<Tensor<f64>>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    params.zero_grad();
    let (base, base_trace) = with_branch_trace(&mut loss);
    base?.backward()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_params = params.len().max(1);
    let per_param = cfg.coords_per_param.max(cfg.min_coords.div_ceil(n_params));

    let eval = |loss: &mut dyn FnMut() -> Result<Tensor<f64>>| -> Result<(f64, u64)> {
        let (l, trace) = with_branch_trace(loss);
        Ok((l?.item(), trace))
    };

    let mut report = Vec::with_capacity(params.len());
    for p in params.params() {
        let analytic = p.value.grad_or_zeros();
        let numel = p.value.numel();
        let mut coords = sample(&mut rng, numel, per_param.min(numel)).into_vec();
        coords.sort_unstable();

        let mut check = ParamCheck {
            name: p.name.clone(),
            checked: Vec::new(),
            excluded: Vec::new(),
            max_rel_error: 0.0,
        };
        for idx in coords {
            let orig = p.value.data()[idx];
            p.value.update_data(|d| d[idx] = orig + cfg.step);
            let plus = eval(&mut loss);
            p.value.update_data(|d| d[idx] = orig - cfg.step);
            let minus = eval(&mut loss);
            p.value.update_data(|d| d[idx] = orig);
            let ((lp, tp), (lm, tm)) = (plus?, minus?);
            if tp != base_trace || tm != base_trace {
                check.excluded.push(idx);
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.step);
            let rel = relative_error(analytic[idx], numeric);
            check.max_rel_error = check.max_rel_error.max(rel);
            check.checked.push(CoordinateCheck {
                index: idx,
                analytic: analytic[idx],
                numeric,
                rel_error: rel,
            });
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn linear_model_gradients_are_exact() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = store.add_uniform("w", &[3, 2], 3, &mut rng).unwrap();
        let b = store.add_uniform("b", &[2], 3, &mut rng).unwrap();
        let x = Tensor::new(vec![0.5, -0.2, 0.9, 0.1, 0.3, -0.7], &[2, 3]).unwrap();
        let report = grad_check(
            &store,
            || {
                let y = ops::linear(&x, &w, &b)?;
                Ok(ops::sum(&ops::mul_broadcast(&y, &y)?))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{}", report.max_rel_error());
        assert_eq!(report.checked(), 8);
    }

    #[test]
    fn max_pool_tie_is_excluded() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add_constant("p", &[1, 1, 1, 2], 1.0).unwrap();
        let report = grad_check(
            &store,
            || Ok(ops::sum(&ops::max_pool2d(&ops::reshape(&p, &[1, 1, 1, 2])?, 1, 1)?)),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.excluded(), 0, "window 1 has no ties");

        let report = grad_check(
            &store,
            || Ok(ops::sum(&ops::pool_global(&p, ops::PoolMode::Max)?)),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.excluded(), 2);
        assert_eq!(report.checked(), 0);
        assert!(!report.passed());
    }
}
