//! Forward-mode dual numbers.
//!
//! A `Dual` carries a value and one directional derivative, so a gradient in
//! `p` variables takes `p` sweeps with unit seed directions. Model code is
//! written once against the [`Scalar`] trait and evaluated with `f64` (plain
//! value) or `Dual` (value plus exact derivative, no finite-difference noise).

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub val: f64,
    pub der: f64,
}

impl Dual {
    pub fn constant(val: f64) -> Self {
        Dual { val, der: 0.0 }
    }

    /// Seed a variable: derivative 1 in its own direction.
    pub fn var(val: f64) -> Self {
        Dual { val, der: 1.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            val: self.val + o.val,
            der: self.der + o.der,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            val: self.val - o.val,
            der: self.der - o.der,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            val: self.val * o.val,
            der: self.der * o.val + self.val * o.der,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let v = self.val / o.val;
        Dual {
            val: v,
            der: (self.der - v * o.der) / o.val,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            val: -self.val,
            der: -self.der,
        }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual {
            val: self.val + o,
            der: self.der,
        }
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    fn sub(self, o: f64) -> Dual {
        Dual {
            val: self.val - o,
            der: self.der,
        }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual {
            val: self.val * o,
            der: self.der * o,
        }
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    fn div(self, o: f64) -> Dual {
        Dual {
            val: self.val / o,
            der: self.der / o,
        }
    }
}

/// Scalar interface shared by `f64` and [`Dual`].
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: f64) -> Self;
    /// Logistic function, stable for large |x|.
    fn sigmoid(self) -> Self;
    /// Standard normal CDF.
    fn norm_cdf(self) -> Self;
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn norm_cdf_f64(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

pub(crate) fn norm_pdf_f64(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    fn norm_cdf(self) -> Self {
        norm_cdf_f64(self)
    }
}

impl Scalar for Dual {
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        Dual {
            val: e,
            der: e * self.der,
        }
    }
    fn ln(self) -> Self {
        Dual {
            val: self.val.ln(),
            der: self.der / self.val,
        }
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        Dual {
            val: s,
            der: 0.5 * self.der / s,
        }
    }
    fn powf(self, e: f64) -> Self {
        Dual {
            val: self.val.powf(e),
            der: e * self.val.powf(e - 1.0) * self.der,
        }
    }
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        Dual {
            val: s,
            der: s * (1.0 - s) * self.der,
        }
    }
    fn norm_cdf(self) -> Self {
        Dual {
            val: norm_cdf_f64(self.val),
            der: norm_pdf_f64(self.val) * self.der,
        }
    }
}
