//! Per-coordinate parameter transforms.
//!
//! Individual parameters live on two scales: the natural scale `psi` (where a
//! volume is positive, a probability sits in (0,1)) and the working scale
//! `phi = u(psi)` on which priors are Gaussian and samplers operate. `forward`
//! is `u`, `backward` is `u^-1`; `backward` is total on the real line.

use serde::{Deserialize, Serialize};

use crate::dual::{norm_pdf_f64, Dual, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Identity,
    Log,
    Logit,
    Probit,
}

impl Transform {
    /// Natural -> working scale. Errors when `psi` is outside the domain.
    pub fn forward(self, psi: f64) -> Result<f64> {
        if !psi.is_finite() {
            return Err(Error::Invalid(format!("non-finite value {psi} in transform")));
        }
        match self {
            Transform::Identity => Ok(psi),
            Transform::Log => {
                if psi > 0.0 {
                    Ok(psi.ln())
                } else {
                    Err(Error::Invalid(format!("log transform requires psi > 0, got {psi}")))
                }
            }
            Transform::Logit => {
                if psi > 0.0 && psi < 1.0 {
                    Ok((psi / (1.0 - psi)).ln())
                } else {
                    Err(Error::Invalid(format!(
                        "logit transform requires psi in (0,1), got {psi}"
                    )))
                }
            }
            Transform::Probit => {
                if psi > 0.0 && psi < 1.0 {
                    Ok(norm_quantile(psi))
                } else {
                    Err(Error::Invalid(format!(
                        "probit transform requires psi in (0,1), got {psi}"
                    )))
                }
            }
        }
    }

    /// Working -> natural scale; defined for every real `phi`.
    pub fn backward<S: Scalar>(self, phi: S) -> S {
        match self {
            Transform::Identity => phi,
            Transform::Log => phi.exp(),
            Transform::Logit => phi.sigmoid(),
            Transform::Probit => phi.norm_cdf(),
        }
    }
}

/// Standard normal quantile, polished to a fixed point of the CDF used by
/// [`Scalar::norm_cdf`] so forward/backward round-trip at machine precision.
fn norm_quantile(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let start = statrs::distribution::Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p);
    let mut x = start;
    for _ in 0..3 {
        let pdf = norm_pdf_f64(x);
        if pdf < 1e-300 {
            break;
        }
        let step = (Scalar::norm_cdf(x) - p) / pdf;
        x -= step;
        if step.abs() < 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Apply `forward` coordinate-wise.
pub fn forward_all(transforms: &[Transform], psi: &[f64]) -> Result<Vec<f64>> {
    if transforms.len() != psi.len() {
        return Err(Error::Invalid(format!(
            "transform count {} does not match vector length {}",
            transforms.len(),
            psi.len()
        )));
    }
    transforms
        .iter()
        .zip(psi)
        .map(|(t, &x)| t.forward(x))
        .collect()
}

/// Apply `backward` coordinate-wise.
pub fn backward_all(transforms: &[Transform], phi: &[f64]) -> Vec<f64> {
    transforms
        .iter()
        .zip(phi)
        .map(|(t, &x)| t.backward(x))
        .collect()
}

/// Coordinate-wise `backward` on duals (used by likelihood sweeps).
pub fn backward_all_dual(transforms: &[Transform], phi: &[Dual]) -> Vec<Dual> {
    transforms
        .iter()
        .zip(phi)
        .map(|(t, &x)| t.backward(x))
        .collect()
}
