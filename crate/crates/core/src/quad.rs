//! Adaptive Simpson quadrature, plain and dual-valued.

use crate::dual::Dual;
use crate::error::{Error, Result};

fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
    h / 6.0 * (fa + 4.0 * fm + fb)
}

fn rec<F: Fn(f64) -> Result<f64>>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = simpson(fa, flm, fm, m - a);
    let right = simpson(fm, frm, fb, b - m);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol || depth == 0 {
        return Ok(left + right + err / 15.0);
    }
    Ok(rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
        + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
}

/// Integrate `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> Result<f64>>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if !(b >= a) {
        return Err(Error::Invalid(format!("bad integration range [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fm = f(0.5 * (a + b))?;
    let fb = f(b)?;
    let whole = simpson(fa, fm, fb, b - a);
    rec(&f, a, b, fa, fm, fb, whole, tol, 48)
}

/// Dual-valued variant: the partition refinement is driven by both the value
/// and the derivative estimate so each component meets `tol`.
pub fn adaptive_simpson_dual<F: Fn(f64) -> Result<Dual>>(
    f: F,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<Dual> {
    fn simpson_d(fa: Dual, fm: Dual, fb: Dual, h: f64) -> Dual {
        (fa + fm * 4.0 + fb) * (h / 6.0)
    }
    fn rec_d<F: Fn(f64) -> Result<Dual>>(
        f: &F,
        a: f64,
        b: f64,
        fa: Dual,
        fm: Dual,
        fb: Dual,
        whole: Dual,
        tol: f64,
        depth: u32,
    ) -> Result<Dual> {
        let m = 0.5 * (a + b);
        let flm = f(0.5 * (a + m))?;
        let frm = f(0.5 * (m + b))?;
        let left = simpson_d(fa, flm, fm, m - a);
        let right = simpson_d(fm, frm, fb, b - m);
        let err = left + right - whole;
        if (err.val.abs().max(err.der.abs()) <= 15.0 * tol) || depth == 0 {
            return Ok(left + right + err / 15.0);
        }
        Ok(rec_d(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?
            + rec_d(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?)
    }
    if !(b >= a) {
        return Err(Error::Invalid(format!("bad integration range [{a}, {b}]")));
    }
    if a == b {
        return Ok(Dual::constant(0.0));
    }
    let fa = f(a)?;
    let fm = f(0.5 * (a + b))?;
    let fb = f(b)?;
    let whole = simpson_d(fa, fm, fb, b - a);
    rec_d(&f, a, b, fa, fm, fb, whole, tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::Scalar;

    #[test]
    fn integrates_polynomial_exactly() {
        let v = adaptive_simpson(|x| Ok(x * x * x - 2.0 * x + 1.0), 0.0, 2.0, 1e-12).unwrap();
        assert!((v - (4.0 - 4.0 + 2.0)).abs() < 1e-10);
    }

    #[test]
    fn integrates_exponential() {
        let v = adaptive_simpson(|x| Ok(x.exp()), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-10);
    }

    #[test]
    fn dual_integral_carries_derivative() {
        // d/da int_0^1 exp(a x) dx = int_0^1 x exp(a x) dx
        let a = 0.7;
        let v = adaptive_simpson_dual(
            |x| Ok((Dual::var(a) * x).exp()),
            0.0,
            1.0,
            1e-12,
        )
        .unwrap();
        let expected = (a.exp() - 1.0) / a;
        let expected_der = (a.exp() * (a - 1.0) + 1.0) / (a * a);
        assert!((v.val - expected).abs() < 1e-10);
        assert!((v.der - expected_der).abs() < 1e-8);
    }
}
