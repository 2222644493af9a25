//! Stochastic-approximation EM over a population of individuals.
//!
//! Each outer iteration runs a few Markov transitions per individual (the
//! simulation step), folds the complete-data sufficient statistics into a
//! stochastic-approximation average, and re-maximizes the population
//! parameters in closed form. The transition kernel is scheduled per
//! iteration, which is how the accelerated variant switches from the
//! MAP-proposal independence sampler to random walks after a few iterations.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{predictions, ErrorModel, ObservationModel, Posterior};
use crate::map_laplace::{compute_map, make_spd, ProposalFamily, SPD_FLOOR};
use crate::model::{IndividualData, Observations, Theta};
use crate::rng::stream_rng;
use crate::samplers::{ChainState, Kernel, KernelDriver, RwmAdaptState};

/// Smallest residual variance the M-step will report.
pub const SIGMA2_FLOOR: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One row of the kernel schedule: from iteration `start` (1-based) onward,
/// run `transitions` steps of `kernel` per individual per outer iteration.
#[derive(Clone, Copy, Debug)]
pub struct SchedulePhase {
    pub start: usize,
    pub kernel: Kernel,
    pub transitions: usize,
}

#[derive(Clone, Debug)]
pub struct SaemConfig {
    /// Outer iterations K.
    pub n_iter: usize,
    /// Iterations with stepsize 1 before the decay starts.
    pub burn_len: usize,
    /// Decay exponent: gamma_k = (k - burn_len)^(-decay) after the burn-in.
    pub decay: f64,
    pub schedule: Vec<SchedulePhase>,
    pub seed: u64,
    pub map_tol: f64,
    pub map_max_iter: usize,
}

impl SaemConfig {
    /// Reference configuration: adaptive random-walk cycles throughout.
    pub fn reference(n_iter: usize, seed: u64) -> Self {
        SaemConfig {
            n_iter,
            burn_len: default_burn(n_iter),
            decay: 0.7,
            schedule: vec![SchedulePhase {
                start: 1,
                kernel: Kernel::RwmCycle,
                transitions: 5,
            }],
            seed,
            map_tol: 1e-6,
            map_max_iter: 200,
        }
    }

    /// Accelerated configuration: MAP-proposal independence kernel for the
    /// first `switch_after` iterations, random-walk cycles afterwards.
    pub fn accelerated(n_iter: usize, seed: u64, switch_after: usize) -> Self {
        let mut config = Self::reference(n_iter, seed);
        config.schedule = vec![
            SchedulePhase {
                start: 1,
                kernel: Kernel::NlmeImh {
                    family: ProposalFamily::Gaussian,
                },
                transitions: 1,
            },
            SchedulePhase {
                start: switch_after + 1,
                kernel: Kernel::RwmCycle,
                transitions: 5,
            },
        ];
        config
    }

    pub fn with_burn(mut self, burn_len: usize, decay: f64) -> Self {
        self.burn_len = burn_len;
        self.decay = decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter > 0 && self.burn_len >= self.n_iter {
            return Err(Error::Config(format!(
                "burn length {} must be below the iteration count {}",
                self.burn_len, self.n_iter
            )));
        }
        if !(self.decay > 0.5 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay exponent must lie in (0.5, 1], got {}",
                self.decay
            )));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("kernel schedule is empty".into()));
        }
        if self.schedule[0].start != 1 {
            return Err(Error::Config(
                "the first schedule phase must start at iteration 1".into(),
            ));
        }
        for w in self.schedule.windows(2) {
            if w[1].start <= w[0].start {
                return Err(Error::Config(
                    "schedule phases must have strictly increasing starts".into(),
                ));
            }
        }
        for phase in &self.schedule {
            if phase.transitions == 0 {
                return Err(Error::Config(
                    "each schedule phase needs at least one transition".into(),
                ));
            }
        }
        if !(self.map_tol > 0.0) {
            return Err(Error::Config(format!(
                "map tolerance must be positive, got {}",
                self.map_tol
            )));
        }
        Ok(())
    }

    /// Stepsize: 1 through the burn-in, then `(k - burn_len)^(-decay)`.
    pub fn gamma(&self, k: usize) -> f64 {
        if k <= self.burn_len {
            1.0
        } else {
            ((k - self.burn_len) as f64).powf(-self.decay)
        }
    }

    /// Kernel and transition count in effect at iteration `k` (1-based).
    pub fn phase(&self, k: usize) -> &SchedulePhase {
        self.schedule
            .iter()
            .rev()
            .find(|p| p.start <= k)
            .expect("validated schedule starts at 1")
    }
}

fn default_burn(n_iter: usize) -> usize {
    if n_iter > 100 {
        100
    } else {
        n_iter / 2
    }
}

// ---------------------------------------------------------------------------
// Sufficient statistics
// ---------------------------------------------------------------------------

/// Stochastic-approximation averages of the complete-data statistics.
#[derive(Clone, Debug)]
pub struct SufficientStats {
    /// Smoothed sum of individual working-scale vectors.
    pub s1: DVector<f64>,
    /// Smoothed sum of outer products.
    pub s2: DMatrix<f64>,
    /// Smoothed residual sum (model-weighted squares) for error parameters.
    pub s3: f64,
    /// Smoothed per-individual vectors, used by the covariate update.
    pub indiv: Vec<DVector<f64>>,
    pub updates: usize,
}

impl SufficientStats {
    pub fn zeros(p: usize, n_individuals: usize) -> Self {
        SufficientStats {
            s1: DVector::zeros(p),
            s2: DMatrix::zeros(p, p),
            s3: 0.0,
            indiv: vec![DVector::zeros(p); n_individuals],
            updates: 0,
        }
    }

    /// Fold one complete-data statistic into the average with weight `gamma`.
    pub fn update(&mut self, gamma: f64, draws: &[DVector<f64>], residual: f64) {
        let mut s1_new = DVector::zeros(self.s1.len());
        let mut s2_new = DMatrix::zeros(self.s2.nrows(), self.s2.ncols());
        for phi in draws {
            s1_new += phi;
            s2_new += phi * phi.transpose();
        }
        self.s1 += (&s1_new - &self.s1) * gamma;
        self.s2 += (&s2_new - &self.s2) * gamma;
        self.s3 += (residual - self.s3) * gamma;
        for (smooth, phi) in self.indiv.iter_mut().zip(draws) {
            *smooth += (phi - &*smooth) * gamma;
        }
        self.updates += 1;
    }
}

// ---------------------------------------------------------------------------
// M-step
// ---------------------------------------------------------------------------

/// Flags raised while re-maximizing.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MstepFlags {
    /// The covariance update was not positive definite and was floored.
    pub omega_floored: bool,
    /// The residual variance update fell below the floor.
    pub sigma2_floored: bool,
}

/// Closed-form maximization of the complete-data likelihood given smoothed
/// statistics. `template` supplies transforms, names, covariate structure and
/// the error-model shape; `total_obs` is the number of continuous
/// observations in the dataset.
pub fn mstep(
    stats: &SufficientStats,
    template: &Theta,
    individuals: &[IndividualData],
    total_obs: usize,
) -> Result<(Theta, MstepFlags)> {
    if stats.updates == 0 {
        return Err(Error::InvalidState(
            "m-step called before any statistic update".into(),
        ));
    }
    let pop = &template.population;
    let p = pop.dim();
    let n = individuals.len() as f64;
    let mut flags = MstepFlags::default();

    // Population location (and covariate coefficients when present).
    let (phi_pop, beta_new) = match pop.beta() {
        None => ((&stats.s1 / n), None),
        Some(beta) => {
            // Least squares of smoothed individual means on [1, covariates]:
            // the common Omega weighting cancels in the normal equations.
            let q = beta.nrows();
            let d = 1 + q;
            let mut xtx = DMatrix::zeros(d, d);
            let mut xty = DMatrix::zeros(d, p);
            for (i, ind) in individuals.iter().enumerate() {
                let c = ind.covariates.as_ref().ok_or_else(|| {
                    Error::Invalid(format!("individual {} lacks covariates", ind.id))
                })?;
                if c.len() != q {
                    return Err(Error::Invalid(format!(
                        "individual {} has {} covariates, expected {q}",
                        ind.id,
                        c.len()
                    )));
                }
                let mut x = DVector::zeros(d);
                x[0] = 1.0;
                x.rows_mut(1, q).copy_from(c);
                xtx += &x * x.transpose();
                xty += x * stats.indiv[i].transpose();
            }
            let solved = xtx
                .lu()
                .solve(&xty)
                .ok_or_else(|| Error::Numerical("covariate design is singular".into()))?;
            let phi_pop = solved.row(0).transpose();
            let beta_new = solved.rows(1, q).into_owned();
            (phi_pop, Some(beta_new))
        }
    };

    // Random-effect covariance around the per-individual prior means.
    let mut omega = match (&beta_new, pop.beta()) {
        (None, _) => &stats.s2 / n - &phi_pop * phi_pop.transpose(),
        (Some(beta), _) => {
            let mut acc = stats.s2.clone();
            for (i, ind) in individuals.iter().enumerate() {
                let c = ind.covariates.as_ref().expect("checked above");
                let m_i = &phi_pop + beta.transpose() * c;
                let h_i = &stats.indiv[i];
                acc -= h_i * m_i.transpose() + &m_i * h_i.transpose() - &m_i * m_i.transpose();
            }
            acc / n
        }
    };
    omega = (&omega + omega.transpose()) * 0.5;
    if pop.diagonal_omega() {
        let diag = DVector::from_iterator(p, (0..p).map(|j| omega[(j, j)].max(SPD_FLOOR)));
        if (0..p).any(|j| omega[(j, j)] < SPD_FLOOR) {
            flags.omega_floored = true;
        }
        omega = DMatrix::from_diagonal(&diag);
    } else {
        let (fixed, repaired) = make_spd(&omega);
        omega = fixed;
        flags.omega_floored = repaired;
    }

    let psi_pop: Vec<f64> = pop
        .transforms()
        .iter()
        .zip(phi_pop.iter())
        .map(|(t, &x)| t.backward(x))
        .collect();
    let mut population = pop.reparameterized(psi_pop, omega)?;
    if let Some(beta) = beta_new {
        population = population.with_covariates(beta)?;
    }

    // Residual error update (constant and proportional models only; a
    // combined model has no closed-form joint update and is left untouched).
    let error = match template.error {
        Some(ErrorModel::Constant { .. }) => {
            let mut sigma2 = stats.s3 / total_obs.max(1) as f64;
            if sigma2 < SIGMA2_FLOOR {
                sigma2 = SIGMA2_FLOOR;
                flags.sigma2_floored = true;
            }
            Some(ErrorModel::Constant { sigma2 })
        }
        Some(ErrorModel::Proportional { .. }) => {
            let mut b2 = stats.s3 / total_obs.max(1) as f64;
            if b2 < SIGMA2_FLOOR {
                b2 = SIGMA2_FLOOR;
                flags.sigma2_floored = true;
            }
            Some(ErrorModel::Proportional { b: b2.sqrt() })
        }
        other => other,
    };

    Ok((Theta::new(population, error), flags))
}

/// Residual statistic of one individual at `phi`: squared residuals for a
/// constant error model, squared relative residuals for a proportional one.
fn residual_stat(
    phi: &DVector<f64>,
    individual: &IndividualData,
    obs: &ObservationModel,
    transforms: &[crate::transform::Transform],
) -> Result<f64> {
    let ObservationModel::Continuous { structural, error } = obs else {
        return Ok(0.0);
    };
    let Observations::Continuous { values, .. } = &individual.observations else {
        return Ok(0.0);
    };
    let preds = predictions(phi, individual, structural.as_ref(), transforms)?;
    let mut acc = 0.0;
    for (f, y) in preds.iter().zip(values) {
        let r = y - f;
        match error {
            ErrorModel::Constant { .. } | ErrorModel::Combined { .. } => acc += r * r,
            ErrorModel::Proportional { .. } => {
                if *f == 0.0 {
                    return Err(Error::eval("prediction is zero under proportional error", None));
                }
                acc += (r / f) * (r / f);
            }
        }
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Trace
// ---------------------------------------------------------------------------

/// Per-iteration record of the estimation run.
#[derive(Clone, Debug)]
pub struct SaemIteration {
    pub iter: usize,
    pub gamma: f64,
    pub kernel: &'static str,
    /// Flattened parameter values aligned with `SaemTrace::names`.
    pub theta: Vec<f64>,
    /// Move-level acceptance rate across individuals this iteration.
    pub acceptance: f64,
    /// Individuals whose independence kernel degraded to a random walk.
    pub fallbacks: usize,
    pub flags: MstepFlags,
}

/// Full history of one SAEM run.
#[derive(Clone, Debug)]
pub struct SaemTrace {
    pub names: Vec<String>,
    pub iterations: Vec<SaemIteration>,
    pub final_theta: Theta,
}

impl SaemTrace {
    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    /// Series of one named component over iterations.
    pub fn component(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.names.iter().position(|n| n == name)?;
        Some(self.iterations.iter().map(|it| it.theta[idx]).collect())
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// Maximum-likelihood estimation by stochastic-approximation EM.
///
/// `obs_model` fixes the structural model and the error-model shape; its
/// error parameters are replaced by the current iterate each iteration.
pub fn saem_fit(
    dataset: &[IndividualData],
    obs_model: &ObservationModel,
    theta0: &Theta,
    config: &SaemConfig,
) -> Result<SaemTrace> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("dataset is empty".into()));
    }
    if matches!(obs_model, ObservationModel::Continuous { .. }) && theta0.error.is_none() {
        return Err(Error::Config(
            "continuous observation model needs initial error parameters".into(),
        ));
    }
    let p = theta0.population.dim();
    let n = dataset.len();
    let total_obs: usize = dataset
        .iter()
        .map(|d| match &d.observations {
            Observations::Continuous { values, .. } => values.len(),
            Observations::TimeToEvent { .. } => 0,
        })
        .sum();

    let mut theta = theta0.clone();
    let mut stats = SufficientStats::zeros(p, n);
    let mut rngs: Vec<ChaCha12Rng> = (0..n)
        .map(|i| stream_rng(config.seed, &dataset[i].id, 1))
        .collect();
    let mut adapts: Vec<RwmAdaptState> = {
        let omega = theta.population.omega();
        let sds: Vec<f64> = (0..p).map(|j| omega[(j, j)].sqrt()).collect();
        (0..n).map(|_| RwmAdaptState::new(&sds)).collect()
    };
    // Random-walk chains start at the individual prior means; chains facing
    // an independence kernel start at the joint modes instead. An
    // independence proposal centered on the mode may never accept from a
    // start whose importance weight exceeds every candidate's, and a frozen
    // chain collapses the estimated random-effect covariance. The mode is
    // where that kernel's first accepted draw would land anyway; if the
    // solve fails the prior mean is kept.
    let mode_start = matches!(config.phase(1).kernel, Kernel::NlmeImh { .. });
    let mut states: Vec<ChainState> = {
        let obs0 = obs_model.with_error(theta.error.as_ref())?;
        dataset
            .par_iter()
            .map(|ind| {
                let post = Posterior::new(ind, &obs0, &theta.population)?;
                let m = theta.population.prior_mean(ind)?;
                let start = if mode_start {
                    compute_map(&post, &m, config.map_tol, config.map_max_iter)
                        .map(|map| map.phi)
                        .unwrap_or(m)
                } else {
                    m
                };
                ChainState::at(&post, start)
            })
            .collect::<Result<Vec<_>>>()?
    };

    let names = theta.component_names();
    let mut iterations = Vec::with_capacity(config.n_iter);

    for k in 1..=config.n_iter {
        let phase = config.phase(k);
        let obs_k = obs_model.with_error(theta.error.as_ref())?;
        let population = theta.population.clone();

        // Simulation step: transitions are independent across individuals.
        let step_out: Result<Vec<(u64, u64, bool)>> = dataset
            .par_iter()
            .zip(states.par_iter_mut())
            .zip(adapts.par_iter_mut())
            .zip(rngs.par_iter_mut())
            .map(|(((ind, state), adapt), rng)| {
                let post = Posterior::new(ind, &obs_k, &population)?;
                // The cached log target was computed under the previous
                // iterate; refresh it before stepping.
                *state = ChainState::at(&post, state.phi.clone())?;
                // Rebuild the independence proposal at most once per outer
                // iteration, starting the MAP search from the chain state.
                let driver = KernelDriver::prepare(
                    &post,
                    phase.kernel,
                    state,
                    config.map_tol,
                    config.map_max_iter,
                )?;
                let mut moves = 0;
                let mut accepts = 0;
                for _ in 0..phase.transitions {
                    let rec = driver.step(&post, state, adapt, rng)?;
                    moves += rec.moves;
                    accepts += rec.accepts;
                }
                Ok((moves, accepts, driver.fallback))
            })
            .collect();
        let step_out = step_out?;
        let moves: u64 = step_out.iter().map(|s| s.0).sum();
        let accepts: u64 = step_out.iter().map(|s| s.1).sum();
        let fallbacks = step_out.iter().filter(|s| s.2).count();

        // Stochastic approximation of the complete-data statistics.
        let draws: Vec<DVector<f64>> = states.iter().map(|s| s.phi.clone()).collect();
        let mut residual = 0.0;
        for (ind, phi) in dataset.iter().zip(&draws) {
            residual += residual_stat(phi, ind, &obs_k, population.transforms())?;
        }
        stats.update(config.gamma(k), &draws, residual);

        // Maximization.
        let (theta_new, flags) = mstep(&stats, &theta, dataset, total_obs)?;
        theta = theta_new;

        iterations.push(SaemIteration {
            iter: k,
            gamma: config.gamma(k),
            kernel: phase.kernel.tag(),
            theta: theta.flatten(),
            acceptance: if moves == 0 { 0.0 } else { accepts as f64 / moves as f64 },
            fallbacks,
            flags,
        });
    }

    Ok(SaemTrace {
        names,
        iterations,
        final_theta: theta,
    })
}

/// Accelerated fit: MAP-proposal independence kernel for the first 20
/// iterations, then the reference random-walk cycle.
pub fn fsaem_fit(
    dataset: &[IndividualData],
    obs_model: &ObservationModel,
    theta0: &Theta,
    config: &SaemConfig,
) -> Result<SaemTrace> {
    let mut accelerated = config.clone();
    accelerated.schedule = SaemConfig::accelerated(config.n_iter, config.seed, 20).schedule;
    saem_fit(dataset, obs_model, theta0, &accelerated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PopulationModel;
    use crate::models::LinearModel;
    use crate::transform::Transform;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::sync::Arc;

    #[test]
    fn gamma_schedule_reference_values() {
        let config = SaemConfig::reference(200, 1);
        assert_eq!(config.burn_len, 100);
        for k in 1..=100 {
            assert_eq!(config.gamma(k), 1.0);
        }
        assert_eq!(config.gamma(101), 1.0); // (k - K1)^(-a) at k - K1 = 1
        assert_relative_eq!(config.gamma(200), 100.0f64.powf(-0.7), epsilon = 1e-15);
        assert!((config.gamma(200) - 0.0398).abs() < 1e-4);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut config = SaemConfig::reference(100, 1);
        config.burn_len = 100;
        assert!(config.validate().is_err());
        let mut config = SaemConfig::reference(200, 1);
        config.decay = 0.5;
        assert!(config.validate().is_err());
        let mut config = SaemConfig::reference(200, 1);
        config.schedule[0].start = 2;
        assert!(config.validate().is_err());
        let mut config = SaemConfig::reference(200, 1);
        config.schedule[0].transitions = 0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn schedule_lookup_picks_last_applicable_phase() {
        let config = SaemConfig::accelerated(200, 1, 20);
        assert_eq!(config.phase(1).kernel.tag(), "nlme_imh");
        assert_eq!(config.phase(20).kernel.tag(), "nlme_imh");
        assert_eq!(config.phase(21).kernel.tag(), "rwm_cycle");
        assert_eq!(config.phase(200).kernel.tag(), "rwm_cycle");
    }

    #[test]
    fn stats_update_is_a_convex_combination() {
        let mut stats = SufficientStats::zeros(1, 2);
        let draws = vec![DVector::from_vec(vec![2.0]), DVector::from_vec(vec![4.0])];
        stats.update(1.0, &draws, 10.0);
        assert_relative_eq!(stats.s1[0], 6.0);
        assert_relative_eq!(stats.s3, 10.0);
        // A second update with gamma in (0, 1] stays between old and new.
        let draws2 = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])];
        stats.update(0.25, &draws2, 2.0);
        assert_relative_eq!(stats.s1[0], 4.5);
        assert_relative_eq!(stats.s3, 8.0);
        assert!(stats.s1[0] <= 6.0 && stats.s1[0] >= 0.0);
    }

    fn plain_theta(p: usize) -> Theta {
        let pop = PopulationModel::gaussian(
            vec![0.0; p],
            DMatrix::identity(p, p),
            vec![Transform::Identity; p],
        )
        .unwrap();
        Theta::new(pop, Some(ErrorModel::constant(1.0).unwrap()))
    }

    #[test]
    fn mstep_hand_examples() {
        // Two draws -1 and 1: mean 0, variance 1.
        let template = plain_theta(1);
        let individuals = vec![
            IndividualData::continuous("1", vec![0.0], vec![0.5], 0.0).unwrap(),
            IndividualData::continuous("2", vec![0.0], vec![-0.5], 0.0).unwrap(),
        ];
        let mut stats = SufficientStats::zeros(1, 2);
        stats.update(
            1.0,
            &[DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
            10.0,
        );
        // Residual sum 10 over 20 observations: sigma2 = 0.5.
        let (theta, flags) = mstep(&stats, &template, &individuals, 20).unwrap();
        assert_relative_eq!(theta.population.psi_pop()[0], 0.0);
        assert_relative_eq!(theta.population.omega()[(0, 0)], 1.0);
        assert_relative_eq!(
            match theta.error.unwrap() {
                ErrorModel::Constant { sigma2 } => sigma2,
                _ => unreachable!(),
            },
            0.5
        );
        assert!(!flags.omega_floored);
        assert!(!flags.sigma2_floored);
    }

    #[test]
    fn mstep_floors_degenerate_updates() {
        // All draws identical: zero variance, floored and flagged.
        let template = plain_theta(1);
        let individuals = vec![
            IndividualData::continuous("1", vec![0.0], vec![0.5], 0.0).unwrap(),
            IndividualData::continuous("2", vec![0.0], vec![-0.5], 0.0).unwrap(),
        ];
        let mut stats = SufficientStats::zeros(1, 2);
        let m = DVector::from_vec(vec![0.7]);
        stats.update(1.0, &[m.clone(), m.clone()], 0.0);
        let (theta, flags) = mstep(&stats, &template, &individuals, 20).unwrap();
        assert_relative_eq!(theta.population.psi_pop()[0], 0.7);
        assert!(theta.population.omega()[(0, 0)] >= SPD_FLOOR * 0.999);
        assert!(flags.omega_floored);
        assert!(flags.sigma2_floored);
        assert_relative_eq!(
            match theta.error.unwrap() {
                ErrorModel::Constant { sigma2 } => sigma2,
                _ => unreachable!(),
            },
            SIGMA2_FLOOR
        );
    }

    /// Complete-data expected log-likelihood given smoothed statistics, up to
    /// constants in theta.
    fn q_function(theta: &Theta, stats: &SufficientStats, n: f64, total_obs: f64) -> f64 {
        let pop = &theta.population;
        let m = pop.phi_pop();
        let omega = pop.omega();
        let chol = omega.clone().cholesky().unwrap();
        let log_det = 2.0 * (0..pop.dim()).map(|j| chol.l()[(j, j)].ln()).sum::<f64>();
        let centered =
            &stats.s2 - &stats.s1 * m.transpose() - m * stats.s1.transpose() + m * m.transpose() * n;
        let omega_inv = chol.inverse();
        let trace = (&omega_inv * centered).trace();
        let sigma2 = match theta.error {
            Some(ErrorModel::Constant { sigma2 }) => sigma2,
            _ => 1.0,
        };
        -0.5 * n * log_det - 0.5 * trace - 0.5 * total_obs * sigma2.ln()
            - 0.5 * stats.s3 / sigma2
    }

    #[test]
    fn mstep_maximizes_q_function() {
        let mut rng = crate::rng::stream_rng(19, "qtest", 0);
        let p = 2;
        let n_ind = 6;
        let individuals: Vec<IndividualData> = (0..n_ind)
            .map(|i| {
                IndividualData::continuous(format!("{i}"), vec![0.0], vec![0.1], 0.0).unwrap()
            })
            .collect();
        let template = plain_theta(p);
        for _ in 0..50 {
            let mut stats = SufficientStats::zeros(p, n_ind);
            let draws: Vec<DVector<f64>> = (0..n_ind)
                .map(|_| {
                    DVector::from_iterator(p, (0..p).map(|_| 2.0 * rng.gen::<f64>() - 1.0))
                })
                .collect();
            stats.update(1.0, &draws, 1.0 + rng.gen::<f64>() * 5.0);
            let total_obs = 12.0;
            let (theta, _) = mstep(&stats, &template, &individuals, 12).unwrap();
            let q0 = q_function(&theta, &stats, n_ind as f64, total_obs);

            // Perturb each component both ways; Q must not increase.
            for j in 0..p {
                for delta in [-1e-3, 1e-3] {
                    let mut psi = theta.population.psi_pop().iter().copied().collect::<Vec<_>>();
                    psi[j] += delta;
                    let perturbed = Theta::new(
                        theta
                            .population
                            .reparameterized(psi, theta.population.omega().clone())
                            .unwrap(),
                        theta.error,
                    );
                    assert!(q_function(&perturbed, &stats, n_ind as f64, total_obs) <= q0 + 1e-9);
                }
            }
            for i in 0..p {
                for j in 0..=i {
                    for delta in [-1e-3, 1e-3] {
                        let mut omega = theta.population.omega().clone();
                        omega[(i, j)] += delta;
                        omega[(j, i)] = omega[(i, j)];
                        if omega.clone().cholesky().is_none() {
                            continue;
                        }
                        let perturbed = Theta::new(
                            theta
                                .population
                                .reparameterized(
                                    theta.population.psi_pop().iter().copied().collect(),
                                    omega,
                                )
                                .unwrap(),
                            theta.error,
                        );
                        assert!(
                            q_function(&perturbed, &stats, n_ind as f64, total_obs) <= q0 + 1e-9
                        );
                    }
                }
            }
            let sigma2 = match theta.error.unwrap() {
                ErrorModel::Constant { sigma2 } => sigma2,
                _ => unreachable!(),
            };
            for delta in [-1e-3, 1e-3] {
                let perturbed = Theta::new(
                    theta.population.clone(),
                    Some(ErrorModel::constant(sigma2 + delta).unwrap()),
                );
                assert!(q_function(&perturbed, &stats, n_ind as f64, total_obs) <= q0 + 1e-9);
            }
        }
    }

    fn one_way_dataset(
        n_ind: usize,
        n_obs: usize,
        m: f64,
        omega2: f64,
        sigma2: f64,
        seed: u64,
    ) -> Vec<IndividualData> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n_ind)
            .map(|i| {
                let mut rng = crate::rng::stream_rng(seed, "oneway", i as u64);
                let z: f64 = StandardNormal.sample(&mut rng);
                let phi = m + omega2.sqrt() * z;
                let times: Vec<f64> = (0..n_obs).map(|j| j as f64).collect();
                let values: Vec<f64> = (0..n_obs)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        phi + sigma2.sqrt() * e
                    })
                    .collect();
                IndividualData::continuous(format!("{i}"), times, values, 0.0).unwrap()
            })
            .collect()
    }

    /// Analytic MLE of the balanced one-way random-effects model.
    fn one_way_mle(dataset: &[IndividualData]) -> (f64, f64, f64) {
        let n_ind = dataset.len() as f64;
        let mut means = Vec::new();
        let mut ssw = 0.0;
        let mut n_obs = 0.0;
        for ind in dataset {
            let Observations::Continuous { values, .. } = &ind.observations else {
                unreachable!()
            };
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            ssw += values.iter().map(|y| (y - mean).powi(2)).sum::<f64>();
            means.push(mean);
            n_obs = n;
        }
        let grand = means.iter().sum::<f64>() / n_ind;
        let v = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / n_ind;
        let sigma2 = ssw / (n_ind * (n_obs - 1.0));
        let omega2 = v - sigma2 / n_obs;
        (grand, omega2, sigma2)
    }

    fn one_way_obs(n_obs: usize) -> ObservationModel {
        ObservationModel::Continuous {
            structural: Arc::new(LinearModel::new(DMatrix::from_element(n_obs, 1, 1.0))),
            error: ErrorModel::constant(1.0).unwrap(),
        }
    }

    #[test]
    fn saem_with_exact_kernel_converges_to_analytic_mle() {
        let dataset = one_way_dataset(4, 10, 0.5, 1.0, 1e-4, 202);
        let (m_hat, omega2_hat, sigma2_hat) = one_way_mle(&dataset);
        assert!(omega2_hat > 0.0, "interior MLE required for this check");
        let obs = one_way_obs(10);
        let theta0 = Theta::new(
            PopulationModel::gaussian(
                vec![0.0],
                DMatrix::from_element(1, 1, 0.5),
                vec![Transform::Identity],
            )
            .unwrap(),
            Some(ErrorModel::constant(0.1).unwrap()),
        );
        // The independence kernel is exact on this linear model, so the
        // simulation step draws directly from the conditional.
        let mut config = SaemConfig::reference(200, 77);
        config.schedule = vec![SchedulePhase {
            start: 1,
            kernel: Kernel::NlmeImh {
                family: ProposalFamily::Gaussian,
            },
            transitions: 1,
        }];
        let trace = saem_fit(&dataset, &obs, &theta0, &config).unwrap();
        let theta = &trace.final_theta;
        let fallbacks: usize = trace.iterations.iter().map(|it| it.fallbacks).sum();
        assert_eq!(fallbacks, 0, "exact kernel must not degrade");
        assert!((theta.population.psi_pop()[0] - m_hat).abs() < 1e-3);
        assert!((theta.population.omega()[(0, 0)] - omega2_hat).abs() < 1e-3);
        let sigma2 = match theta.error.unwrap() {
            ErrorModel::Constant { sigma2 } => sigma2,
            _ => unreachable!(),
        };
        assert!((sigma2 - sigma2_hat).abs() < 1e-3);
    }

    #[test]
    fn zero_iterations_change_nothing() {
        let dataset = one_way_dataset(2, 5, 0.0, 1.0, 0.1, 7);
        let obs = one_way_obs(5);
        let theta0 = plain_theta(1);
        let mut config = SaemConfig::reference(0, 5);
        config.burn_len = 0;
        let trace = saem_fit(&dataset, &obs, &theta0, &config).unwrap();
        assert!(trace.is_empty());
        assert_eq!(trace.final_theta.flatten(), theta0.flatten());
    }

    #[test]
    fn runs_are_seed_deterministic() {
        let dataset = one_way_dataset(3, 6, 0.2, 0.8, 0.2, 99);
        let obs = one_way_obs(6);
        let theta0 = plain_theta(1);
        let config = SaemConfig::reference(30, 42).with_burn(10, 0.7);
        let t1 = saem_fit(&dataset, &obs, &theta0, &config).unwrap();
        let t2 = saem_fit(&dataset, &obs, &theta0, &config).unwrap();
        for (a, b) in t1.iterations.iter().zip(&t2.iterations) {
            assert_eq!(a.theta, b.theta);
            assert_eq!(a.acceptance, b.acceptance);
        }
    }

    #[test]
    fn accelerated_schedule_switches_kernel_at_the_boundary() {
        let dataset = one_way_dataset(3, 6, 0.2, 0.8, 0.2, 99);
        let obs = one_way_obs(6);
        let theta0 = plain_theta(1);
        let config = SaemConfig::reference(25, 42).with_burn(10, 0.7);
        let trace = fsaem_fit(&dataset, &obs, &theta0, &config).unwrap();
        for it in &trace.iterations {
            if it.iter <= 20 {
                assert_eq!(it.kernel, "nlme_imh", "iteration {}", it.iter);
            } else {
                assert_eq!(it.kernel, "rwm_cycle", "iteration {}", it.iter);
            }
        }
    }

    #[test]
    fn covariate_coefficients_are_recovered() {
        use rand_distr::{Distribution, StandardNormal};
        // phi_i = m + beta * c_i + eta, small noise; exact linear kernel.
        let (m_true, beta_true) = (1.0, 0.8);
        let n_ind = 24;
        let dataset: Vec<IndividualData> = (0..n_ind)
            .map(|i| {
                let mut rng = crate::rng::stream_rng(31, "cov", i as u64);
                let c = (i as f64 / n_ind as f64) * 2.0 - 1.0;
                let z: f64 = StandardNormal.sample(&mut rng);
                let phi = m_true + beta_true * c + 0.3 * z;
                let values: Vec<f64> = (0..8)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        phi + 0.05 * e
                    })
                    .collect();
                IndividualData::continuous(format!("{i}"), (0..8).map(|t| t as f64).collect(), values, 0.0)
                    .unwrap()
                    .with_covariates(vec![c])
            })
            .collect();
        let obs = one_way_obs(8);
        let pop0 = PopulationModel::gaussian(
            vec![0.0],
            DMatrix::from_element(1, 1, 1.0),
            vec![Transform::Identity],
        )
        .unwrap()
        .with_covariates(DMatrix::zeros(1, 1))
        .unwrap();
        let theta0 = Theta::new(pop0, Some(ErrorModel::constant(0.5).unwrap()));
        let mut config = SaemConfig::reference(120, 13).with_burn(60, 0.7);
        config.schedule = vec![SchedulePhase {
            start: 1,
            kernel: Kernel::NlmeImh {
                family: ProposalFamily::Gaussian,
            },
            transitions: 1,
        }];
        let trace = saem_fit(&dataset, &obs, &theta0, &config).unwrap();
        let theta = &trace.final_theta;
        let beta = theta.population.beta().unwrap()[(0, 0)];
        assert!((theta.population.psi_pop()[0] - m_true).abs() < 0.15);
        assert!((beta - beta_true).abs() < 0.15, "beta {beta}");
    }
}

