//! Conditional and joint log densities with exact gradients.
//!
//! All densities are functions of the working-scale vector `phi`; the natural
//! scale enters through the transforms, inside the dual-number sweeps, so
//! gradients account for the chain rule exactly. Hessians are central finite
//! differences of the dual gradient.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::model::{IndividualData, Observations, PopulationModel};
use crate::models::{Hazard, Structural};
use crate::quad::adaptive_simpson_dual;
use crate::transform::{backward_all, backward_all_dual, Transform};

#[cfg(test)]
const LN_2PI: f64 = 1.8378770664093453;

/// Residual error model for continuous observations: `g` is the standard
/// deviation of the additive noise, possibly depending on the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ErrorModel {
    /// `g = sigma` with `sigma2 = sigma^2`.
    Constant { sigma2: f64 },
    /// `g = b f`.
    Proportional { b: f64 },
    /// `g = a + b f`.
    Combined { a: f64, b: f64 },
}

impl ErrorModel {
    pub fn constant(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::Invalid(format!("sigma2 must be positive, got {sigma2}")));
        }
        Ok(ErrorModel::Constant { sigma2 })
    }

    pub fn proportional(b: f64) -> Result<Self> {
        if !(b > 0.0) || !b.is_finite() {
            return Err(Error::Invalid(format!("b must be positive, got {b}")));
        }
        Ok(ErrorModel::Proportional { b })
    }

    pub fn combined(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0) || !(b >= 0.0) || !(a + b > 0.0) {
            return Err(Error::Invalid(format!(
                "combined error needs a >= 0, b >= 0, a + b > 0; got ({a}, {b})"
            )));
        }
        Ok(ErrorModel::Combined { a, b })
    }

    fn sd_generic<S: Scalar>(&self, f: S) -> Result<S> {
        let g = match *self {
            ErrorModel::Constant { sigma2 } => S::from_f64(sigma2.sqrt()),
            ErrorModel::Proportional { b } => f * b,
            ErrorModel::Combined { a, b } => f * b + a,
        };
        if !(g.value() > 0.0) || !g.value().is_finite() {
            return Err(Error::eval(
                format!("residual sd must be positive, got {}", g.value()),
                None,
            ));
        }
        Ok(g)
    }

    /// Residual standard deviation at prediction `f`.
    pub fn sd(&self, f: f64) -> Result<f64> {
        self.sd_generic(f)
    }
}

/// Observation side of the model: a structural function with residual error,
/// or a hazard for repeated events.
#[derive(Clone)]
pub enum ObservationModel {
    Continuous {
        structural: Arc<dyn Structural>,
        error: ErrorModel,
    },
    TimeToEvent {
        hazard: Arc<dyn Hazard>,
    },
}

impl ObservationModel {
    pub fn dim(&self) -> usize {
        match self {
            ObservationModel::Continuous { structural, .. } => structural.dim(),
            ObservationModel::TimeToEvent { hazard } => hazard.dim(),
        }
    }

    /// Same structure with substituted error parameters (used as theta moves).
    pub fn with_error(&self, error: Option<&ErrorModel>) -> Result<ObservationModel> {
        match (self, error) {
            (ObservationModel::Continuous { structural, .. }, Some(e)) => {
                Ok(ObservationModel::Continuous {
                    structural: Arc::clone(structural),
                    error: *e,
                })
            }
            (ObservationModel::Continuous { .. }, None) => Err(Error::Config(
                "continuous observation model needs error parameters".into(),
            )),
            (ObservationModel::TimeToEvent { hazard }, _) => Ok(ObservationModel::TimeToEvent {
                hazard: Arc::clone(hazard),
            }),
        }
    }
}

/// Value with optional derivatives of a log density.
#[derive(Clone, Debug)]
pub struct LogDensityEval {
    pub value: f64,
    pub gradient: Option<DVector<f64>>,
    pub hessian: Option<DMatrix<f64>>,
}

fn continuous_data<'a>(individual: &'a IndividualData) -> Result<(&'a [f64], &'a [f64])> {
    match &individual.observations {
        Observations::Continuous { times, values } => Ok((times, values)),
        _ => Err(Error::Invalid(format!(
            "individual {} does not carry continuous observations",
            individual.id
        ))),
    }
}

fn tte_data<'a>(individual: &'a IndividualData) -> Result<(&'a [f64], bool, f64)> {
    match &individual.observations {
        Observations::TimeToEvent {
            event_times,
            censored,
            censor_time,
        } => Ok((event_times, *censored, *censor_time)),
        _ => Err(Error::Invalid(format!(
            "individual {} does not carry event observations",
            individual.id
        ))),
    }
}

fn cont_loglik_generic<S: Scalar>(
    phi: &[S],
    individual: &IndividualData,
    error: &ErrorModel,
    transforms: &[Transform],
    eval: impl Fn(f64, &[S], f64) -> S,
) -> Result<S> {
    let (times, values) = continuous_data(individual)?;
    let psi: Vec<S> = transforms
        .iter()
        .zip(phi)
        .map(|(t, &x)| t.backward(x))
        .collect();
    let mut ll = S::from_f64(0.0);
    for (j, (&t, &y)) in times.iter().zip(values).enumerate() {
        let f = eval(t, &psi, individual.dose);
        if !f.value().is_finite() {
            return Err(Error::eval(
                format!("structural model returned {} at t = {t}", f.value()),
                Some(j),
            ));
        }
        let g = error.sd_generic(f).map_err(|e| match e {
            Error::Eval { message, .. } => Error::eval(message, Some(j)),
            other => other,
        })?;
        let r = f - y;
        ll = ll - (g * g * (2.0 * std::f64::consts::PI)).ln() * 0.5 - r * r / (g * g * 2.0);
    }
    Ok(ll)
}

/// Conditional log-likelihood of continuous observations at `phi`.
pub fn cont_loglik(
    phi: &DVector<f64>,
    individual: &IndividualData,
    structural: &dyn Structural,
    error: &ErrorModel,
    transforms: &[Transform],
) -> Result<f64> {
    cont_loglik_generic(phi.as_slice(), individual, error, transforms, |t, psi, dose| {
        structural.eval(t, psi, dose)
    })
}

fn tte_loglik_generic<S: Scalar>(
    psi: &[S],
    individual: &IndividualData,
    cum: impl Fn(f64, &[S]) -> Result<S>,
    log_h: impl Fn(f64, &[S]) -> Result<S>,
) -> Result<S> {
    let (events, censored, censor_time) = tte_data(individual)?;
    let end = if censored {
        censor_time
    } else {
        *events.last().expect("uncensored record has events")
    };
    let mut ll = -cum(end, psi)?;
    for (j, &t) in events.iter().enumerate() {
        let lh = log_h(t, psi).map_err(|e| match e {
            Error::Eval { message, .. } => Error::eval(message, Some(j)),
            other => other,
        })?;
        if lh.value().is_nan() {
            return Err(Error::eval("hazard not positive at event time", Some(j)));
        }
        ll = ll + lh;
    }
    Ok(ll)
}

/// Log-likelihood of a repeated time-to-event record at `phi`:
/// `-H(end) + sum_j log h(t_j)` with the cumulative hazard `H` in closed form
/// when the model provides one, adaptive quadrature (tolerance 1e-10) otherwise.
pub fn tte_loglik(
    phi: &DVector<f64>,
    individual: &IndividualData,
    hazard: &dyn Hazard,
    transforms: &[Transform],
) -> Result<f64> {
    let psi = backward_all(transforms, phi.as_slice());
    tte_loglik_generic(
        &psi,
        individual,
        |t, p| crate::models::cum_hazard_value(hazard, t, p),
        |t, p| hazard.log_hazard(t, p),
    )
}

fn tte_loglik_dual(
    phi: &[Dual],
    individual: &IndividualData,
    hazard: &dyn Hazard,
    transforms: &[Transform],
) -> Result<Dual> {
    let psi = backward_all_dual(transforms, phi);
    tte_loglik_generic(
        &psi,
        individual,
        |t, p| match hazard.cum_hazard_dual(t, p)? {
            Some(v) => Ok(v),
            None => adaptive_simpson_dual(|u| hazard.hazard_dual(u, p), 0.0, t, 1e-10),
        },
        |t, p| hazard.log_hazard_dual(t, p),
    )
}

/// Individual posterior bundle: everything needed to evaluate and
/// differentiate `log p(y_i, phi_i)` for one individual.
#[derive(Clone, Copy)]
pub struct Posterior<'a> {
    pub individual: &'a IndividualData,
    pub obs: &'a ObservationModel,
    pub population: &'a PopulationModel,
}

impl<'a> Posterior<'a> {
    pub fn new(
        individual: &'a IndividualData,
        obs: &'a ObservationModel,
        population: &'a PopulationModel,
    ) -> Result<Self> {
        if obs.dim() != population.dim() {
            return Err(Error::Invalid(format!(
                "observation model dimension {} does not match population dimension {}",
                obs.dim(),
                population.dim()
            )));
        }
        Ok(Posterior {
            individual,
            obs,
            population,
        })
    }

    pub fn dim(&self) -> usize {
        self.population.dim()
    }

    /// Conditional log-likelihood `log p(y_i | phi)`.
    pub fn cond_loglik(&self, phi: &DVector<f64>) -> Result<f64> {
        match self.obs {
            ObservationModel::Continuous { structural, error } => cont_loglik(
                phi,
                self.individual,
                structural.as_ref(),
                error,
                self.population.transforms(),
            ),
            ObservationModel::TimeToEvent { hazard } => tte_loglik(
                phi,
                self.individual,
                hazard.as_ref(),
                self.population.transforms(),
            ),
        }
    }

    fn cond_loglik_sweep(&self, phi: &DVector<f64>, dir: usize) -> Result<Dual> {
        let phi_dual: Vec<Dual> = phi
            .iter()
            .enumerate()
            .map(|(j, &x)| if j == dir { Dual::var(x) } else { Dual::constant(x) })
            .collect();
        match self.obs {
            ObservationModel::Continuous { structural, error } => cont_loglik_generic(
                &phi_dual,
                self.individual,
                error,
                self.population.transforms(),
                |t, psi, dose| structural.eval_dual(t, psi, dose),
            ),
            ObservationModel::TimeToEvent { hazard } => tte_loglik_dual(
                &phi_dual,
                self.individual,
                hazard.as_ref(),
                self.population.transforms(),
            ),
        }
    }

    /// Value and gradient of the conditional log-likelihood (dual sweeps).
    pub fn grad_cond(&self, phi: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let p = self.dim();
        let mut grad = DVector::zeros(p);
        let mut value = 0.0;
        for j in 0..p {
            let d = self.cond_loglik_sweep(phi, j)?;
            grad[j] = d.der;
            if j == 0 {
                value = d.val;
            }
        }
        if p == 0 {
            value = self.cond_loglik(phi)?;
        }
        Ok((value, grad))
    }

    /// Joint log density `log p(y_i, phi)`.
    pub fn log_density(&self, phi: &DVector<f64>) -> Result<f64> {
        Ok(self.cond_loglik(phi)? + self.population.prior_logpdf(phi, self.individual)?)
    }

    /// Value and gradient of the joint log density.
    pub fn grad(&self, phi: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (value, grad_cond) = self.grad_cond(phi)?;
        let prior = self.population.prior_logpdf(phi, self.individual)?;
        let prior_grad = self.population.prior_grad(phi, self.individual)?;
        Ok((value + prior, grad_cond + prior_grad))
    }

    /// Hessian of the conditional log-likelihood: central finite differences
    /// of the dual gradient, symmetrized.
    pub fn hess_cond(&self, phi: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.fd_hessian(phi, |p| Ok(self.grad_cond(p)?.1))
    }

    /// Hessian of the joint log density (conditional + prior curvature).
    pub fn hess(&self, phi: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.fd_hessian(phi, |p| Ok(self.grad(p)?.1))
    }

    fn fd_hessian(
        &self,
        phi: &DVector<f64>,
        grad: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<DMatrix<f64>> {
        let p = self.dim();
        let step = f64::EPSILON.cbrt();
        let mut h = DMatrix::zeros(p, p);
        for j in 0..p {
            let hj = step * phi[j].abs().max(1.0);
            let mut hi = phi.clone();
            let mut lo = phi.clone();
            hi[j] += hj;
            lo[j] -= hj;
            let col = (grad(&hi)? - grad(&lo)?) / (2.0 * hj);
            h.set_column(j, &col);
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    /// Predictions, Jacobian of `f` with respect to `phi`, and residual sds at
    /// `phi` (continuous models only).
    pub fn linearize(&self, phi: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
        let ObservationModel::Continuous { structural, error } = self.obs else {
            return Err(Error::Invalid(
                "linearization requires a continuous observation model".into(),
            ));
        };
        let (times, _) = continuous_data(self.individual)?;
        let n = times.len();
        let p = self.dim();
        let mut preds = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, p);
        for dir in 0..p {
            let phi_dual: Vec<Dual> = phi
                .iter()
                .enumerate()
                .map(|(j, &x)| if j == dir { Dual::var(x) } else { Dual::constant(x) })
                .collect();
            let psi = backward_all_dual(self.population.transforms(), &phi_dual);
            for (i, &t) in times.iter().enumerate() {
                let f = structural.eval_dual(t, &psi, self.individual.dose);
                if !f.val.is_finite() {
                    return Err(Error::eval(
                        format!("structural model returned {} at t = {t}", f.val),
                        Some(i),
                    ));
                }
                jac[(i, dir)] = f.der;
                if dir == 0 {
                    preds[i] = f.val;
                }
            }
        }
        if p == 0 {
            return Err(Error::Invalid("empty parameter vector".into()));
        }
        let mut sds = DVector::zeros(n);
        for i in 0..n {
            sds[i] = error.sd(preds[i]).map_err(|e| match e {
                Error::Eval { message, .. } => Error::eval(message, Some(i)),
                other => other,
            })?;
        }
        Ok((preds, jac, sds))
    }
}

/// Structural-model predictions at each observation time of `individual`.
pub fn predictions(
    phi: &DVector<f64>,
    individual: &IndividualData,
    structural: &dyn Structural,
    transforms: &[Transform],
) -> Result<Vec<f64>> {
    let (times, _) = continuous_data(individual)?;
    let psi = backward_all(transforms, phi.as_slice());
    times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let f = structural.eval(t, &psi, individual.dose);
            if !f.is_finite() {
                return Err(Error::eval(
                    format!("structural model returned {f} at t = {t}"),
                    Some(j),
                ));
            }
            Ok(f)
        })
        .collect()
}

/// Joint log density `log p(y_i, phi_i)` (conditional plus prior).
pub fn joint_logpdf(
    phi: &DVector<f64>,
    individual: &IndividualData,
    obs: &ObservationModel,
    population: &PopulationModel,
) -> Result<f64> {
    Posterior::new(individual, obs, population)?.log_density(phi)
}

/// Joint log density with gradient.
pub fn grad_joint(
    phi: &DVector<f64>,
    individual: &IndividualData,
    obs: &ObservationModel,
    population: &PopulationModel,
) -> Result<LogDensityEval> {
    let post = Posterior::new(individual, obs, population)?;
    let (value, gradient) = post.grad(phi)?;
    Ok(LogDensityEval {
        value,
        gradient: Some(gradient),
        hessian: None,
    })
}

/// Joint log density with gradient and symmetrized FD Hessian.
pub fn hess_joint(
    phi: &DVector<f64>,
    individual: &IndividualData,
    obs: &ObservationModel,
    population: &PopulationModel,
) -> Result<LogDensityEval> {
    let post = Posterior::new(individual, obs, population)?;
    let (value, gradient) = post.grad(phi)?;
    let hessian = post.hess(phi)?;
    Ok(LogDensityEval {
        value,
        gradient: Some(gradient),
        hessian: Some(hessian),
    })
}
