use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so coordinates whose true gradient
/// is (near) zero are judged by absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} coords={} max_rel_err={:.3e} max_abs_err={:.3e} worst={} tol={:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err,
            self.max_abs_err,
            self.worst,
            self.tol
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient of scalar `f` at `x` with central
/// differences, coordinate by coordinate.
pub fn grad_check<F>(mut f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = f(&mut g, xv)?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);
    check_coordinates(&analytic, step, tol, |i, delta| {
        let mut shifted = x.clone();
        shifted.data_mut()[i] += delta;
        let mut g = Graph::new();
        let xv = g.param(shifted);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    })
}

/// Central-difference check of `analytic[i]` for each coordinate, where
/// `eval(i, delta)` evaluates the function with coordinate `i` shifted by
/// `delta`.
pub fn check_coordinates<F>(analytic: &[f64], step: f64, tol: f64, mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Config(format!("grad-check step must be positive, got {step}")));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: 0,
        checked: analytic.len(),
        tol,
        pass: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let plus = eval(i, step)?;
        let minus = eval(i, -step)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(
                "grad-check",
                format!("non-finite value at perturbed coordinate {i}"),
            ));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let rel = relative_error(a, numeric);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = i;
        }
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}

/// Convenience alias used by model-level checks.
pub use check_coordinates as grad_check_params;
