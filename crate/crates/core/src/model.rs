//! Population model, individual data, and the parameter bundle.
//!
//! Individual parameters follow `u(psi_i) = u(psi_pop) + beta' c_i + eta_i`
//! with `eta_i ~ N(0, Omega)` (or a Student analogue). Everything downstream
//! (likelihoods, samplers, SAEM) works on the transformed scale `phi = u(psi)`;
//! the natural scale is a presentation view.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::transform::{forward_all, Transform};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorFamily {
    Gaussian,
    /// Student t with `dof > 2`; the stored covariance is `dof/(dof-2) * xi`.
    Student { dof: f64 },
}

/// Population-level parameters plus the prior over individual effects.
#[derive(Clone, Debug)]
pub struct PopulationModel {
    psi_pop: DVector<f64>,
    phi_pop: DVector<f64>,
    omega: DMatrix<f64>,
    omega_chol: Cholesky<f64, Dyn>,
    omega_inv: DMatrix<f64>,
    transforms: Vec<Transform>,
    names: Vec<String>,
    beta: Option<DMatrix<f64>>,
    prior: PriorFamily,
    /// Shape matrix of the Student prior (`xi`), with its factor and inverse.
    student_shape: Option<(DMatrix<f64>, Cholesky<f64, Dyn>, DMatrix<f64>)>,
    diagonal_omega: bool,
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Invalid(format!("{what} must be square")));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-10 * m.abs().max().max(1.0) {
        return Err(Error::Invalid(format!("{what} must be symmetric")));
    }
    let sym = (m + m.transpose()) * 0.5;
    Cholesky::new(sym).ok_or_else(|| Error::Invalid(format!("{what} must be positive definite")))
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("p{j}")).collect()
}

impl PopulationModel {
    pub fn gaussian(
        psi_pop: Vec<f64>,
        omega: DMatrix<f64>,
        transforms: Vec<Transform>,
    ) -> Result<Self> {
        let p = psi_pop.len();
        if transforms.len() != p || omega.nrows() != p {
            return Err(Error::Invalid(
                "psi_pop, omega and transforms must have matching dimension".into(),
            ));
        }
        let omega_chol = check_spd(&omega, "omega")?;
        let omega_inv = omega_chol.inverse();
        let psi_pop = DVector::from_vec(psi_pop);
        let phi_pop = DVector::from_vec(forward_all(&transforms, psi_pop.as_slice())?);
        Ok(PopulationModel {
            names: default_names(p),
            psi_pop,
            phi_pop,
            omega,
            omega_chol,
            omega_inv,
            transforms,
            beta: None,
            prior: PriorFamily::Gaussian,
            student_shape: None,
            diagonal_omega: false,
        })
    }

    /// Student prior with shape `xi`; the covariance `omega = dof/(dof-2) * xi`
    /// is derived, so `dof > 2` is required.
    pub fn student(
        psi_pop: Vec<f64>,
        dof: f64,
        xi: DMatrix<f64>,
        transforms: Vec<Transform>,
    ) -> Result<Self> {
        if !(dof > 2.0) {
            return Err(Error::Invalid(format!(
                "student prior requires dof > 2, got {dof}"
            )));
        }
        let xi_chol = check_spd(&xi, "xi")?;
        let xi_inv = xi_chol.inverse();
        let omega = &xi * (dof / (dof - 2.0));
        let mut model = Self::gaussian(psi_pop, omega, transforms)?;
        model.prior = PriorFamily::Student { dof };
        model.student_shape = Some((xi, xi_chol, xi_inv));
        Ok(model)
    }

    /// Attach covariate coefficients; `beta` is `q x p` (one row per covariate).
    pub fn with_covariates(mut self, beta: DMatrix<f64>) -> Result<Self> {
        if beta.ncols() != self.dim() {
            return Err(Error::Invalid(format!(
                "beta must have {} columns, got {}",
                self.dim(),
                beta.ncols()
            )));
        }
        self.beta = Some(beta);
        Ok(self)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.dim() {
            return Err(Error::Invalid("one name per parameter required".into()));
        }
        self.names = names;
        Ok(self)
    }

    /// Restrict the M-step update of omega to its diagonal.
    pub fn with_diagonal_omega(mut self) -> Self {
        self.diagonal_omega = true;
        self
    }

    pub fn dim(&self) -> usize {
        self.psi_pop.len()
    }

    pub fn psi_pop(&self) -> &DVector<f64> {
        &self.psi_pop
    }

    pub fn phi_pop(&self) -> &DVector<f64> {
        &self.phi_pop
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn omega_inv(&self) -> &DMatrix<f64> {
        &self.omega_inv
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn beta(&self) -> Option<&DMatrix<f64>> {
        self.beta.as_ref()
    }

    pub fn prior_family(&self) -> PriorFamily {
        self.prior
    }

    pub fn diagonal_omega(&self) -> bool {
        self.diagonal_omega
    }

    /// Prior mean of `phi_i`: `u(psi_pop) + beta' c_i`.
    pub fn prior_mean(&self, individual: &IndividualData) -> Result<DVector<f64>> {
        let mut m = self.phi_pop.clone();
        match (&self.beta, &individual.covariates) {
            (Some(beta), Some(c)) => {
                if c.len() != beta.nrows() {
                    return Err(Error::Invalid(format!(
                        "individual {} has {} covariates, beta has {} rows",
                        individual.id,
                        c.len(),
                        beta.nrows()
                    )));
                }
                m += beta.transpose() * c;
            }
            (Some(_), None) => {
                return Err(Error::Invalid(format!(
                    "model has covariate coefficients but individual {} carries no covariates",
                    individual.id
                )));
            }
            _ => {}
        }
        Ok(m)
    }

    /// Log density of the prior at `phi` (working scale).
    pub fn prior_logpdf(&self, phi: &DVector<f64>, individual: &IndividualData) -> Result<f64> {
        let p = self.dim() as f64;
        let m = self.prior_mean(individual)?;
        let r = phi - m;
        match self.prior {
            PriorFamily::Gaussian => {
                let z = self.omega_chol.l().solve_lower_triangular(&r).ok_or_else(|| {
                    Error::Numerical("triangular solve failed in prior logpdf".into())
                })?;
                let log_det_half: f64 = self.omega_chol.l().diagonal().iter().map(|d| d.ln()).sum();
                Ok(-0.5 * p * LN_2PI - log_det_half - 0.5 * z.dot(&z))
            }
            PriorFamily::Student { dof } => {
                let (_, xi_chol, _) = self.student_shape.as_ref().expect("student shape");
                let z = xi_chol.l().solve_lower_triangular(&r).ok_or_else(|| {
                    Error::Numerical("triangular solve failed in prior logpdf".into())
                })?;
                let q = z.dot(&z);
                let log_det_half: f64 = xi_chol.l().diagonal().iter().map(|d| d.ln()).sum();
                Ok(ln_gamma((dof + p) / 2.0)
                    - ln_gamma(dof / 2.0)
                    - 0.5 * p * (dof * std::f64::consts::PI).ln()
                    - log_det_half
                    - 0.5 * (dof + p) * (1.0 + q / dof).ln())
            }
        }
    }

    /// Gradient of [`Self::prior_logpdf`] with respect to `phi`.
    pub fn prior_grad(&self, phi: &DVector<f64>, individual: &IndividualData) -> Result<DVector<f64>> {
        let m = self.prior_mean(individual)?;
        let r = phi - m;
        match self.prior {
            PriorFamily::Gaussian => Ok(-(&self.omega_inv * r)),
            PriorFamily::Student { dof } => {
                let (_, _, xi_inv) = self.student_shape.as_ref().expect("student shape");
                let xr = xi_inv * &r;
                let q = r.dot(&xr);
                let p = self.dim() as f64;
                Ok(xr * (-(dof + p) / (dof + q)))
            }
        }
    }

    /// Draw `phi_i` from the prior.
    pub fn draw_prior<R: Rng>(&self, individual: &IndividualData, rng: &mut R) -> Result<DVector<f64>> {
        let m = self.prior_mean(individual)?;
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        match self.prior {
            PriorFamily::Gaussian => Ok(m + self.omega_chol.l() * z),
            PriorFamily::Student { dof } => {
                let (_, xi_chol, _) = self.student_shape.as_ref().expect("student shape");
                let w: f64 = ChiSquared::new(dof)
                    .map_err(|e| Error::Numerical(format!("chi-squared setup: {e}")))?
                    .sample(rng);
                Ok(m + xi_chol.l() * z * (dof / w).sqrt())
            }
        }
    }

    /// Rebuild with new population values (M-step); transforms, names, covariates
    /// and prior family are preserved. A Student prior keeps `omega = d/(d-2) xi`
    /// by rescaling the shape.
    pub fn reparameterized(&self, psi_pop: Vec<f64>, omega: DMatrix<f64>) -> Result<Self> {
        let mut next = match self.prior {
            PriorFamily::Gaussian => {
                Self::gaussian(psi_pop, omega, self.transforms.clone())?
            }
            PriorFamily::Student { dof } => {
                let xi = &omega * ((dof - 2.0) / dof);
                Self::student(psi_pop, dof, xi, self.transforms.clone())?
            }
        };
        next.names = self.names.clone();
        next.beta = self.beta.clone();
        next.diagonal_omega = self.diagonal_omega;
        Ok(next)
    }
}

/// One individual's observations.
#[derive(Clone, Debug, PartialEq)]
pub enum Observations {
    Continuous {
        times: Vec<f64>,
        values: Vec<f64>,
    },
    TimeToEvent {
        /// Observed event times, strictly increasing.
        event_times: Vec<f64>,
        /// True when follow-up ended at `censor_time` rather than at the last event.
        censored: bool,
        censor_time: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndividualData {
    pub id: String,
    pub observations: Observations,
    pub covariates: Option<DVector<f64>>,
    pub dose: f64,
}

fn check_strictly_increasing(times: &[f64]) -> Result<()> {
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Invalid(format!(
                "observation times must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

impl IndividualData {
    pub fn continuous(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        dose: f64,
    ) -> Result<Self> {
        let id = id.into();
        if times.len() != values.len() {
            return Err(Error::Invalid(format!(
                "individual {id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        check_strictly_increasing(&times)?;
        if times.iter().any(|t| !t.is_finite()) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("individual {id}: non-finite observation")));
        }
        Ok(IndividualData {
            id,
            observations: Observations::Continuous { times, values },
            covariates: None,
            dose,
        })
    }

    pub fn time_to_event(
        id: impl Into<String>,
        event_times: Vec<f64>,
        censored: bool,
        censor_time: f64,
    ) -> Result<Self> {
        let id = id.into();
        check_strictly_increasing(&event_times)?;
        if !(censor_time >= 0.0) {
            return Err(Error::Invalid(format!(
                "individual {id}: censor time must be nonnegative"
            )));
        }
        if event_times.iter().any(|&t| t > censor_time) {
            return Err(Error::Invalid(format!(
                "individual {id}: event time beyond censor time {censor_time}"
            )));
        }
        if !censored && event_times.is_empty() {
            return Err(Error::Invalid(format!(
                "individual {id}: uncensored record needs at least one event"
            )));
        }
        Ok(IndividualData {
            id,
            observations: Observations::TimeToEvent {
                event_times,
                censored,
                censor_time,
            },
            covariates: None,
            dose: 0.0,
        })
    }

    pub fn with_covariates(mut self, covariates: Vec<f64>) -> Self {
        self.covariates = Some(DVector::from_vec(covariates));
        self
    }

    /// Number of observation records (continuous values or events).
    pub fn n_obs(&self) -> usize {
        match &self.observations {
            Observations::Continuous { times, .. } => times.len(),
            Observations::TimeToEvent { event_times, .. } => event_times.len(),
        }
    }
}

/// Full parameter vector of the population model: population effects plus the
/// residual error parameters of a continuous observation model.
#[derive(Clone, Debug)]
pub struct Theta {
    pub population: PopulationModel,
    pub error: Option<crate::likelihood::ErrorModel>,
}

impl Theta {
    pub fn new(population: PopulationModel, error: Option<crate::likelihood::ErrorModel>) -> Self {
        Theta { population, error }
    }

    /// Flat component names in export order: `<name>_pop`, omega entries, then
    /// error parameters. Diagonal omegas export standard deviations
    /// (`omega_<name>`), full omegas export lower-triangle covariances
    /// (`omega_<ni>_<nj>`).
    pub fn component_names(&self) -> Vec<String> {
        let pop = &self.population;
        let mut names: Vec<String> = pop.names().iter().map(|n| format!("{n}_pop")).collect();
        if pop.diagonal_omega() {
            names.extend(pop.names().iter().map(|n| format!("omega_{n}")));
        } else {
            for i in 0..pop.dim() {
                for j in 0..=i {
                    names.push(format!("omega_{}_{}", pop.names()[i], pop.names()[j]));
                }
            }
        }
        match self.error {
            Some(crate::likelihood::ErrorModel::Constant { .. }) => names.push("sigma2".into()),
            Some(crate::likelihood::ErrorModel::Proportional { .. }) => names.push("b".into()),
            Some(crate::likelihood::ErrorModel::Combined { .. }) => {
                names.push("a".into());
                names.push("b".into());
            }
            None => {}
        }
        names
    }

    /// Component values aligned with [`Self::component_names`].
    pub fn flatten(&self) -> Vec<f64> {
        let pop = &self.population;
        let mut out: Vec<f64> = pop.psi_pop().iter().copied().collect();
        if pop.diagonal_omega() {
            out.extend((0..pop.dim()).map(|j| pop.omega()[(j, j)].sqrt()));
        } else {
            for i in 0..pop.dim() {
                for j in 0..=i {
                    out.push(pop.omega()[(i, j)]);
                }
            }
        }
        match self.error {
            Some(crate::likelihood::ErrorModel::Constant { sigma2 }) => out.push(sigma2),
            Some(crate::likelihood::ErrorModel::Proportional { b }) => out.push(b),
            Some(crate::likelihood::ErrorModel::Combined { a, b }) => {
                out.push(a);
                out.push(b);
            }
            None => {}
        }
        out
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.component_names()
            .iter()
            .position(|n| n == name)
            .map(|i| self.flatten()[i])
    }
}
