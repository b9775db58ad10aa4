use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor added to the finite-difference magnitude in the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// Outcome of comparing an analytic gradient with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max_i |analytic_i - fd_i| / (|fd_i| + 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate that attains the maximum.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + RELATIVE_ERROR_FLOOR)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for the listed coordinates.
pub fn numeric_gradient<F>(mut f: F, point: &[f64], h: f64, coords: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x)?;
        x[i] = orig - h;
        let minus = f(&x)?;
        x[i] = orig;
        let g = (plus - minus) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::Numeric(format!("finite difference at coordinate {i} is {g}")));
        }
        out.push(g);
    }
    Ok(out)
}

/// Checks every coordinate of the analytic gradient returned by `f` at `point`
/// against central finite differences with step `h`.
///
/// `f` returns the scalar value and its gradient with the same shape as the point.
pub fn grad_check<F>(mut f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (_, analytic) = f(point)?;
    if analytic.shape() != point.shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} differs from point shape {:?}",
            analytic.shape(),
            point.shape()
        )));
    }
    let shape = point.shape().to_vec();
    let coords: Vec<usize> = (0..point.len()).collect();
    let numeric = numeric_gradient(
        |x| Ok(f(&Tensor::from_parts(shape.clone(), x.to_vec()))?.0),
        point.data(),
        h,
        &coords,
    )?;
    let analytic = analytic.into_data();
    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0_f64), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}
