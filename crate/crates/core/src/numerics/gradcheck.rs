//! Central finite-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Result, SptError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `0` checks all of them.
    pub coords_per_param: usize,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// exactly zero are compared against round-off rather than against zero.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            coords_per_param: 0,
            floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (param, coordinate, analytic, central difference) at the worst point.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floored(analytic, numeric, 1e-12)
}

pub fn relative_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks the gradient of the scalar built by `f` w.r.t. every tensor in
/// `params`, returning the max relative error over checked coordinates.
/// `f` must be deterministic: any randomness has to be re-seeded per call.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    finite_diff_check_with(
        f,
        params,
        GradCheckOptions {
            step,
            ..GradCheckOptions::default()
        },
    )
    .map(|r| r.max_rel_error)
}

pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = ps.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&g, &vars)?;
        let v = out.value().item()?;
        Ok(v)
    };

    let analytic: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let vars: Vec<_> = params.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let base = eval(params)?;
    if eval(params)? != base {
        return Err(SptError::Usage(
            "finite-difference check needs a deterministic function".into(),
        ));
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].len();
        let stride = if opts.coords_per_param == 0 || opts.coords_per_param >= n {
            1
        } else {
            n / opts.coords_per_param
        };
        let coords = (0..n).step_by(stride.max(1)).take(if opts.coords_per_param == 0 {
            n
        } else {
            opts.coords_per_param
        });
        for ci in coords {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[ci];
            let err = relative_error_floored(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::from_f64(&[3], &[0.5, -2.0, 7.0]).unwrap();
        let x = Tensor::from_f64(&[3], &[0.25, -0.5, 0.125]).unwrap();
        let err = finite_diff_check(
            |g, p| {
                let w = g.constant(w.clone());
                p[0].mul(w)?.sum()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let report = finite_diff_check_with(
            |_, p| p[0].mul(p[0])?.sum(),
            &[x],
            GradCheckOptions::default(),
        )
        .unwrap();
        let (_, _, a, cd) = report.worst.unwrap();
        assert_eq!(a, 6.0);
        assert!((cd - 6.0).abs() < 1e-9);
    }

    #[test]
    fn nondeterminism_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let res = finite_diff_check(
            |_, p| {
                calls.set(calls.get() + 1.0);
                p[0].add_scalar(calls.get())?.sum()
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(SptError::Usage(_))));
    }
}
