use super::matrix::Matrix;
use super::RcveError;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(v: f64, what: &str) -> Result<f64, RcveError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(RcveError::NonFiniteValue { what: what.into() })
    }
}

/// Entrywise `(f(θ+h·e) − f(θ−h·e)) / 2h`.
pub fn central_difference<F>(f: F, theta: &Matrix, h: f64) -> Result<Matrix, RcveError>
where
    F: Fn(&Matrix) -> Result<f64, RcveError>,
{
    if !(h.is_finite() && h > 0.0) {
        return Err(RcveError::InvalidConfig(format!("step must be positive, got {h}")));
    }
    let mut out = Matrix::zeros(theta.rows(), theta.cols());
    let mut probe = theta.clone();
    for i in 0..theta.rows() {
        for j in 0..theta.cols() {
            let x = theta[(i, j)];
            probe[(i, j)] = x + h;
            let up = finite(f(&probe)?, "objective")?;
            probe[(i, j)] = x - h;
            let down = finite(f(&probe)?, "objective")?;
            probe[(i, j)] = x;
            out[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, 1e-8)` over all entries. Less sensitive to
/// roundoff in near-zero entries than the entrywise maximum.
pub fn normwise_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic.as_slice().iter().zip(numeric.as_slice()).map(|(a, n)| (a - n) * (a - n)).sum();
    diff.sqrt() / analytic.sum_squares().sqrt().max(numeric.sum_squares().sqrt()).max(1e-8)
}

fn analytic_and_numeric<F>(f: F, theta: &Matrix, h: f64) -> Result<(Matrix, Matrix), RcveError>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix), RcveError>,
{
    let (v, analytic) = f(theta)?;
    finite(v, "objective")?;
    if analytic.shape() != theta.shape() {
        return Err(RcveError::ShapeMismatch {
            what: "analytic gradient".into(),
            expected: format!("{:?}", theta.shape()),
            actual: format!("{:?}", analytic.shape()),
        });
    }
    if !analytic.is_finite() {
        return Err(RcveError::NonFiniteValue { what: "analytic gradient".into() });
    }
    let numeric = central_difference(|t| f(t).map(|(v, _)| v), theta, h)?;
    Ok((analytic, numeric))
}

/// Max relative error between the analytic gradient returned by `f` at
/// `theta` and central differences of its value.
pub fn grad_check<F>(f: F, theta: &Matrix, h: f64) -> Result<f64, RcveError>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix), RcveError>,
{
    let (analytic, numeric) = analytic_and_numeric(f, theta, h)?;
    Ok(analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}

/// Like [`grad_check`] but reports [`normwise_error`].
pub fn grad_check_normwise<F>(f: F, theta: &Matrix, h: f64) -> Result<f64, RcveError>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix), RcveError>,
{
    let (analytic, numeric) = analytic_and_numeric(f, theta, h)?;
    Ok(normwise_error(&analytic, &numeric))
}
