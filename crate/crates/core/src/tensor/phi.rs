//! The scalar map `φ(x) = x·e^{x+1}` and its inverse on `x ≥ 0`.
//!
//! `φ⁻¹(N − 1)` is the sequence-length factor of the L2 attention bounds.
//! Note `φ⁻¹(y) = W₀(y/e)` with `W₀` the principal Lambert W branch.

use crate::error::{Error, Result};

pub fn phi(x: f64) -> Result<f64> {
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("phi is defined on x >= 0, got {x}")));
    }
    Ok(x * (x + 1.0).exp())
}

/// Solves `x·e^{x+1} = y` for `x ≥ 0`.
///
/// Newton's method from `max(0, ln(y+1) - 1)`, safeguarded by bisection on
/// the bracket `[0, max(1, ln(y+1)) + 1]`. The result satisfies
/// `|φ(x) - y| ≤ 1e-12·max(1, y)` up to the floating-point resolution of `x`.
pub fn phi_inv(y: f64) -> Result<f64> {
    if !(y >= 0.0) || y.is_infinite() {
        return Err(Error::Domain(format!("phi_inv is defined on finite y >= 0, got {y}")));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let tol = 1e-12 * y.max(1.0);
    let ln1p = y.ln_1p();
    let (mut lo, mut hi) = (0.0_f64, ln1p.max(1.0) + 1.0);
    let mut x = (ln1p - 1.0).max(0.0);

    for _ in 0..200 {
        let ex = (x + 1.0).exp();
        let r = x * ex - y;
        if r.abs() <= tol {
            return Ok(x);
        }
        if r > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let deriv = (1.0 + x) * ex;
        let newton = x - r / deriv;
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(x)
}
