//! Central-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub coords_checked: usize,
    pub passed: bool,
    /// Set when the check aborted before comparing gradients.
    pub failure: Option<String>,
}

impl GradReport {
    fn aborted(name: &str, tolerance: f64, cause: String) -> Self {
        GradReport {
            op_name: name.to_string(),
            max_rel_error: f64::INFINITY,
            max_abs_error: f64::INFINITY,
            tolerance,
            coords_checked: 0,
            passed: false,
            failure: Some(cause),
        }
    }

    /// Worst-case combination of several reports under one name.
    pub fn merge(name: &str, reports: &[GradReport]) -> GradReport {
        let tolerance = reports.iter().map(|r| r.tolerance).fold(f64::INFINITY, f64::min);
        GradReport {
            op_name: name.to_string(),
            max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            max_abs_error: reports.iter().map(|r| r.max_abs_error).fold(0.0, f64::max),
            tolerance,
            coords_checked: reports.iter().map(|r| r.coords_checked).sum(),
            passed: !reports.is_empty() && reports.iter().all(|r| r.passed),
            failure: reports.iter().find_map(|r| r.failure.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per parameter tensor (sampled).
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Floor of the relative-error denominator. Gradients smaller than this are
/// compared absolutely, at `tolerance · REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds the scalar on a fresh graph from one leaf per entry of `params`.
pub fn grad_check<F>(name: &str, f: F, params: &[Tensor], opts: &GradCheckOptions) -> GradReport
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| g.param(p.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p.clone())).collect();
        let out = match f(&g, &vars) {
            Ok(v) => v,
            Err(e) => return GradReport::aborted(name, opts.tolerance, e.to_string()),
        };
        if !out.item().is_finite() {
            return GradReport::aborted(name, opts.tolerance, "non-finite function value".into());
        }
        let grads = match g.backward(out) {
            Ok(gr) => gr,
            Err(e) => return GradReport::aborted(name, opts.tolerance, e.to_string()),
        };
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let (mut max_rel, mut max_abs, mut checked) = (0.0f64, 0.0f64, 0usize);
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < p.numel() => {
                let mut c = sample(&mut rng, p.numel(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.numel()).collect(),
        };
        for i in coords {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work);
            work[pi].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work);
            work[pi].data_mut()[i] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                (Err(e), _) | (_, Err(e)) => return GradReport::aborted(name, opts.tolerance, e.to_string()),
                _ => {
                    return GradReport::aborted(
                        name,
                        opts.tolerance,
                        format!("non-finite function value at param {pi} coord {i}"),
                    )
                }
            };
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi].data()[i];
            max_abs = max_abs.max((a - numeric).abs());
            max_rel = max_rel.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    GradReport {
        op_name: name.to_string(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        tolerance: opts.tolerance,
        coords_checked: checked,
        passed: max_rel <= opts.tolerance,
        failure: None,
    }
}
