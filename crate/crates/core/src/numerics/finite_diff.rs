use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Central-difference directional derivative `(f(x + eps y) - f(x - eps y)) / (2 eps)`.
///
/// This is the oracle the velocity layers are checked against.
pub fn central_jvp<F>(f: F, x: &Matrix, y: &Matrix, eps: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut plus = x.clone();
    plus.add_scaled_assign(y, eps)?;
    let mut minus = x.clone();
    minus.add_scaled_assign(y, -eps)?;
    let fp = f(&plus)?;
    let fm = f(&minus)?;
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::NonFinite("central_jvp"));
    }
    Ok(fp.sub(&fm)?.scale(0.5 / eps))
}

/// `max |a - b| / max(max |b|, floor)`: the relative error measure used by the
/// JVP checks.
pub fn relative_error(a: &Matrix, b: &Matrix, floor: f64) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(floor)
}
