//! Bundled structural and hazard models, and dataset simulators.


use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::dual::{Dual, Scalar};
use crate::error::{Error, Result};
use crate::model::{IndividualData, Theta};
use crate::quad::adaptive_simpson;
use crate::rng::stream_rng;
use crate::transform::backward_all;

/// Structural model for continuous observations: predicts `f(t, psi)`.
///
/// `eval_dual` must compute the same expression on dual numbers so likelihood
/// gradients are exact.
pub trait Structural: Send + Sync {
    fn name(&self) -> &str;
    /// Number of individual parameters.
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, psi: &[f64], dose: f64) -> f64;
    fn eval_dual(&self, t: f64, psi: &[Dual], dose: f64) -> Dual;
}

/// Hazard model for repeated time-to-event observations.
pub trait Hazard: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn hazard(&self, t: f64, psi: &[f64]) -> Result<f64>;
    fn hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Dual>;
    fn log_hazard(&self, t: f64, psi: &[f64]) -> Result<f64> {
        Ok(self.hazard(t, psi)?.ln())
    }
    fn log_hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Dual> {
        Ok(self.hazard_dual(t, psi)?.ln())
    }
    /// Closed-form cumulative hazard on `[0, t]` when available; `None` routes
    /// evaluation through adaptive quadrature.
    fn cum_hazard(&self, _t: f64, _psi: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
    fn cum_hazard_dual(&self, _t: f64, _psi: &[Dual]) -> Result<Option<Dual>> {
        Ok(None)
    }
    /// Solve `H(t) = target` for `t` when a closed form exists.
    fn invert_cum_hazard(&self, _target: f64, _psi: &[f64]) -> Result<Option<f64>> {
        Ok(None)
    }
}

// ---------------------------------------------------------------------------
// One-compartment oral absorption
// ---------------------------------------------------------------------------

/// Concentration after a single oral dose: parameters `(ka, V, k)`.
pub fn pk1_oral(t: f64, dose: f64, ka: f64, v: f64, k: f64) -> Result<f64> {
    if v == 0.0 {
        return Err(Error::eval("pk1_oral requires V != 0", None));
    }
    if t < 0.0 {
        return Err(Error::eval(format!("pk1_oral requires t >= 0, got {t}"), None));
    }
    Ok(pk1_generic(t, &[ka, v, k], dose))
}

fn pk1_generic<S: Scalar>(t: f64, psi: &[S], dose: f64) -> S {
    let (ka, v, k) = (psi[0], psi[1], psi[2]);
    if (ka - k).value().abs() < 1e-8 {
        // Removable singularity at ka = k: limit D ka t exp(-k t) / V.
        ka * (dose * t) * (-(k * t)).exp() / v
    } else {
        ka * dose / (v * (ka - k)) * ((-(k * t)).exp() - (-(ka * t)).exp())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Pk1Oral;

impl Structural for Pk1Oral {
    fn name(&self) -> &str {
        "pk1_oral"
    }
    fn dim(&self) -> usize {
        3
    }
    fn eval(&self, t: f64, psi: &[f64], dose: f64) -> f64 {
        pk1_generic(t, psi, dose)
    }
    fn eval_dual(&self, t: f64, psi: &[Dual], dose: f64) -> Dual {
        pk1_generic(t, psi, dose)
    }
}

// ---------------------------------------------------------------------------
// Linear design (test model)
// ---------------------------------------------------------------------------

/// `f(t_j, psi) = (A psi)_j` where `t` indexes rows of a fixed design matrix.
/// Observation times for this model are the row indices `0, 1, ...`.
#[derive(Clone, Debug)]
pub struct LinearModel {
    pub design: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(design: DMatrix<f64>) -> Self {
        LinearModel { design }
    }

    /// Times matching the design rows.
    pub fn times(&self) -> Vec<f64> {
        (0..self.design.nrows()).map(|i| i as f64).collect()
    }

    fn row_at<S: Scalar>(&self, t: f64, psi: &[S]) -> S {
        let row = t.round() as isize;
        if row < 0 || row as usize >= self.design.nrows() {
            return S::from_f64(f64::NAN);
        }
        let row = row as usize;
        let mut acc = S::from_f64(0.0);
        for (j, &p) in psi.iter().enumerate() {
            acc = acc + p * self.design[(row, j)];
        }
        acc
    }
}

impl Structural for LinearModel {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim(&self) -> usize {
        self.design.ncols()
    }
    fn eval(&self, t: f64, psi: &[f64], _dose: f64) -> f64 {
        self.row_at(t, psi)
    }
    fn eval_dual(&self, t: f64, psi: &[Dual], _dose: f64) -> Dual {
        self.row_at(t, psi)
    }
}

// ---------------------------------------------------------------------------
// Weibull hazard
// ---------------------------------------------------------------------------

/// Weibull hazard `h(t) = (beta/lambda) (t/lambda)^(beta-1)` with parameters
/// `(lambda, beta)`; cumulative hazard `(t/lambda)^beta` in closed form.
pub fn weibull_hazard(t: f64, lambda: f64, beta: f64) -> Result<(f64, f64)> {
    if !(lambda > 0.0) || !(beta > 0.0) {
        return Err(Error::eval(
            format!("weibull requires lambda > 0 and beta > 0, got ({lambda}, {beta})"),
            None,
        ));
    }
    if t < 0.0 {
        return Err(Error::eval(format!("weibull requires t >= 0, got {t}"), None));
    }
    if t == 0.0 && beta < 1.0 {
        return Err(Error::eval(
            "weibull hazard diverges at t = 0 for beta < 1",
            None,
        ));
    }
    let h = if t == 0.0 {
        if beta == 1.0 {
            1.0 / lambda
        } else {
            0.0
        }
    } else {
        beta / lambda * (t / lambda).powf(beta - 1.0)
    };
    Ok((h, (t / lambda).powf(beta)))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WeibullHazard;

fn weibull_h_generic<S: Scalar>(t: f64, psi: &[S]) -> Result<S> {
    let (lam, beta) = (psi[0], psi[1]);
    if t == 0.0 {
        return match beta.value() {
            b if b < 1.0 => Err(Error::eval(
                "weibull hazard diverges at t = 0 for beta < 1",
                None,
            )),
            b if b == 1.0 => Ok(S::from_f64(1.0) / lam),
            _ => Ok(S::from_f64(0.0)),
        };
    }
    // (beta/lambda) exp((beta-1) (ln t - ln lambda))
    let log_ratio = -lam.ln() + t.ln();
    Ok(beta / lam * ((beta - 1.0) * log_ratio).exp())
}

fn weibull_cum_generic<S: Scalar>(t: f64, psi: &[S]) -> S {
    let (lam, beta) = (psi[0], psi[1]);
    if t == 0.0 {
        return S::from_f64(0.0);
    }
    (beta * (-lam.ln() + t.ln())).exp()
}

impl Hazard for WeibullHazard {
    fn name(&self) -> &str {
        "weibull"
    }
    fn dim(&self) -> usize {
        2
    }
    fn hazard(&self, t: f64, psi: &[f64]) -> Result<f64> {
        weibull_h_generic(t, psi)
    }
    fn hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Dual> {
        weibull_h_generic(t, psi)
    }
    fn log_hazard(&self, t: f64, psi: &[f64]) -> Result<f64> {
        if t == 0.0 {
            return Ok(weibull_h_generic(t, psi)?.ln());
        }
        let (lam, beta) = (psi[0], psi[1]);
        Ok(beta.ln() - lam.ln() + (beta - 1.0) * (t.ln() - lam.ln()))
    }
    fn log_hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Dual> {
        if t == 0.0 {
            return Ok(weibull_h_generic(t, psi)?.ln());
        }
        let (lam, beta) = (psi[0], psi[1]);
        Ok(beta.ln() - lam.ln() + (beta - 1.0) * (-lam.ln() + t.ln()))
    }
    fn cum_hazard(&self, t: f64, psi: &[f64]) -> Result<Option<f64>> {
        Ok(Some(weibull_cum_generic(t, psi)))
    }
    fn cum_hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Option<Dual>> {
        Ok(Some(weibull_cum_generic(t, psi)))
    }
    fn invert_cum_hazard(&self, target: f64, psi: &[f64]) -> Result<Option<f64>> {
        let (lam, beta) = (psi[0], psi[1]);
        Ok(Some(lam * target.powf(1.0 / beta)))
    }
}

/// Cumulative hazard with quadrature fallback (absolute tolerance 1e-10).
pub fn cum_hazard_value(hazard: &dyn Hazard, t: f64, psi: &[f64]) -> Result<f64> {
    if let Some(v) = hazard.cum_hazard(t, psi)? {
        return Ok(v);
    }
    adaptive_simpson(|u| hazard.hazard(u, psi), 0.0, t, 1e-10)
}

// ---------------------------------------------------------------------------
// Simulators
// ---------------------------------------------------------------------------

/// Per-individual design for continuous simulation.
#[derive(Clone, Debug)]
pub struct ContinuousDesign {
    pub times: Vec<f64>,
    pub dose: f64,
    pub covariates: Option<Vec<f64>>,
}

impl ContinuousDesign {
    pub fn new(times: Vec<f64>, dose: f64) -> Self {
        ContinuousDesign {
            times,
            dose,
            covariates: None,
        }
    }

    /// `n` copies of the same design.
    pub fn replicate(n: usize, times: Vec<f64>, dose: f64) -> Vec<Self> {
        (0..n).map(|_| Self::new(times.clone(), dose)).collect()
    }
}

/// Simulate a continuous dataset: `phi_i` from the prior, then
/// `y_ij = f(t_ij, psi_i) + g_ij eps_ij`.
pub fn simulate_continuous(
    theta: &Theta,
    structural: &dyn Structural,
    design: &[ContinuousDesign],
    seed: u64,
) -> Result<Vec<IndividualData>> {
    let error = theta
        .error
        .as_ref()
        .ok_or_else(|| Error::Config("continuous simulation needs an error model".into()))?;
    let pop = &theta.population;
    if pop.dim() != structural.dim() {
        return Err(Error::Config(format!(
            "population dimension {} does not match structural model dimension {}",
            pop.dim(),
            structural.dim()
        )));
    }
    let mut out = Vec::with_capacity(design.len());
    for (i, d) in design.iter().enumerate() {
        let mut rng = stream_rng(seed, "simulate", i as u64);
        let mut indiv = IndividualData::continuous(
            format!("{}", i + 1),
            d.times.clone(),
            vec![0.0; d.times.len()],
            d.dose,
        )?;
        if let Some(c) = &d.covariates {
            indiv = indiv.with_covariates(c.clone());
        }
        let phi = pop.draw_prior(&indiv, &mut rng)?;
        let psi = backward_all(pop.transforms(), phi.as_slice());
        let values: Vec<f64> = d
            .times
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let f = structural.eval(t, &psi, d.dose);
                if !f.is_finite() {
                    return Err(Error::eval(
                        format!("structural model returned {f} at t = {t}"),
                        Some(j),
                    ));
                }
                let g = error.sd(f).map_err(|e| match e {
                    Error::Eval { message, .. } => Error::eval(message, Some(j)),
                    other => other,
                })?;
                let z: f64 = rng.sample(StandardNormal);
                Ok(f + g * z)
            })
            .collect::<Result<_>>()?;
        if let Observations::Continuous { values: v, .. } = &mut indiv.observations {
            *v = values;
        }
        out.push(indiv);
    }
    Ok(out)
}

use crate::model::Observations;

/// Per-individual design for time-to-event simulation.
#[derive(Clone, Debug)]
pub struct TteDesign {
    pub censor_time: f64,
    pub covariates: Option<Vec<f64>>,
}

impl TteDesign {
    pub fn replicate(n: usize, censor_time: f64) -> Vec<Self> {
        (0..n)
            .map(|_| TteDesign {
                censor_time,
                covariates: None,
            })
            .collect()
    }
}

/// Simulate repeated events by inverting the conditional survival function:
/// successive gaps solve `H(t_prev + g) - H(t_prev) = E`, `E ~ Exp(1)`.
pub fn simulate_tte(
    theta: &Theta,
    hazard: &dyn Hazard,
    design: &[TteDesign],
    seed: u64,
) -> Result<Vec<IndividualData>> {
    let pop = &theta.population;
    if pop.dim() != hazard.dim() {
        return Err(Error::Config(format!(
            "population dimension {} does not match hazard model dimension {}",
            pop.dim(),
            hazard.dim()
        )));
    }
    let mut out = Vec::with_capacity(design.len());
    for (i, d) in design.iter().enumerate() {
        let mut rng = stream_rng(seed, "simulate", i as u64);
        let mut probe = IndividualData::time_to_event(format!("{}", i + 1), vec![], true, d.censor_time)?;
        if let Some(c) = &d.covariates {
            probe = probe.with_covariates(c.clone());
        }
        let phi = pop.draw_prior(&probe, &mut rng)?;
        let psi = backward_all(pop.transforms(), phi.as_slice());

        let mut events = Vec::new();
        let mut t = 0.0f64;
        let mut cum = 0.0f64;
        for _ in 0..100_000 {
            let e: f64 = Exp1.sample(&mut rng);
            let target = cum + e;
            let t_next = match hazard.invert_cum_hazard(target, &psi)? {
                Some(v) => v,
                None => match bisect_cum_hazard(hazard, &psi, t, d.censor_time, target)? {
                    Some(v) => v,
                    None => break,
                },
            };
            if t_next > d.censor_time {
                break;
            }
            let t_next = if t_next <= t {
                // Degenerate gap below time resolution.
                t + (t.abs().max(1e-12)) * 1e-12
            } else {
                t_next
            };
            if t_next > d.censor_time {
                break;
            }
            events.push(t_next);
            t = t_next;
            cum = target;
        }
        let mut indiv =
            IndividualData::time_to_event(format!("{}", i + 1), events, true, d.censor_time)?;
        if let Some(c) = &d.covariates {
            indiv = indiv.with_covariates(c.clone());
        }
        out.push(indiv);
    }
    Ok(out)
}

/// Solve `H(t) = target` for `t` in `(lo, hi]` by bisection (tolerance 1e-10).
/// Returns `None` when `H(hi) < target` (no event before `hi`).
fn bisect_cum_hazard(
    hazard: &dyn Hazard,
    psi: &[f64],
    lo: f64,
    hi: f64,
    target: f64,
) -> Result<Option<f64>> {
    let h_hi = cum_hazard_value(hazard, hi, psi)?;
    if h_hi < target {
        return Ok(None);
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if cum_hazard_value(hazard, m, psi)? < target {
            a = m;
        } else {
            b = m;
        }
        if b - a <= 1e-10 {
            break;
        }
    }
    Ok(Some(b))
}

/// Default sampling times for the bundled PK design.
pub fn default_pk_times() -> Vec<f64> {
    vec![0.5, 1.0, 2.0, 4.0, 8.0, 12.0, 24.0, 48.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::ErrorModel;
    use crate::model::PopulationModel;
    use crate::transform::Transform;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    #[test]
    fn pk1_oral_worked_value() {
        let f = pk1_oral(2.0, 100.0, 1.0, 8.0, 0.1).unwrap();
        // 13.8889 * (exp(-0.2) - exp(-2)) evaluated exactly.
        assert_relative_eq!(f, 9.491603747796793, epsilon = 1e-12);
    }

    #[test]
    fn pk1_oral_zero_time_and_errors() {
        assert_eq!(pk1_oral(0.0, 100.0, 1.0, 8.0, 0.1).unwrap(), 0.0);
        assert!(pk1_oral(2.0, 100.0, 1.0, 0.0, 0.1).is_err());
        assert!(pk1_oral(-1.0, 100.0, 1.0, 8.0, 0.1).is_err());
    }

    #[test]
    fn pk1_oral_continuous_across_absorption_branch() {
        let (dose, v, k, t) = (100.0, 8.0, 0.3, 2.0);
        for scale in [1.0, 5.0, 20.0] {
            let ka_hi = k + 1e-8 + 1e-9 * scale;
            let ka_lo = k + 1e-8 - 1e-9 * f64::min(scale, 9.9);
            let f_hi = pk1_oral(t, dose, ka_hi, v, k).unwrap();
            let f_lo = pk1_oral(t, dose, ka_lo, v, k).unwrap();
            assert!(
                ((f_hi - f_lo) / f_hi).abs() < 1e-6,
                "branch jump: {f_hi} vs {f_lo}"
            );
        }
    }

    #[test]
    fn weibull_worked_values() {
        // lambda=10, beta=3, t=5: h = 0.3 * 0.25 = 0.075, H = 0.125.
        let (h, cum) = weibull_hazard(5.0, 10.0, 3.0).unwrap();
        assert_relative_eq!(h, 0.075, epsilon = 1e-12);
        assert_relative_eq!(cum, 0.125, epsilon = 1e-12);
        // beta=1 reduces to a constant hazard.
        let (h, _) = weibull_hazard(0.0, 2.0, 1.0).unwrap();
        assert_relative_eq!(h, 0.5, epsilon = 1e-15);
        assert!(weibull_hazard(0.0, 2.0, 0.5).is_err());
    }

    #[test]
    fn weibull_quadrature_matches_closed_form() {
        let mut rng = stream_rng(11, "weibull-quad", 0);
        let hz = WeibullHazard;
        for _ in 0..100 {
            let lam = 1.0 + 19.0 * rng.gen::<f64>();
            let beta = 0.8 + 3.2 * rng.gen::<f64>();
            let tau = 0.5 + 29.5 * rng.gen::<f64>();
            let psi = [lam, beta];
            let closed = hz.cum_hazard(tau, &psi).unwrap().unwrap();
            let eps = if beta < 1.0 { 1e-9 } else { 0.0 };
            // Integrable singularity at 0 for beta < 1: start the quadrature
            // just off zero and add the closed-form head.
            let head = if eps > 0.0 {
                hz.cum_hazard(eps, &psi).unwrap().unwrap()
            } else {
                0.0
            };
            let quad =
                head + adaptive_simpson(|u| hz.hazard(u, &psi), eps, tau, 1e-12).unwrap();
            assert!(
                (quad - closed).abs() < 1e-8 * closed.max(1.0),
                "lam={lam} beta={beta} tau={tau}: {quad} vs {closed}"
            );
        }
    }

    fn flat_pop(p: usize, var: f64) -> PopulationModel {
        PopulationModel::gaussian(
            vec![0.0; p],
            DMatrix::identity(p, p) * var,
            vec![Transform::Identity; p],
        )
        .unwrap()
    }

    #[test]
    fn simulated_moments_match_marginal_law() {
        // One observation per individual, f = phi: y ~ N(psi_pop, omega + sigma2).
        let pop = flat_pop(1, 0.49);
        let theta = Theta::new(pop, Some(ErrorModel::constant(0.25).unwrap()));
        let model = LinearModel::new(DMatrix::from_row_slice(1, 1, &[1.0]));
        let design = ContinuousDesign::replicate(10_000, vec![0.0], 0.0);
        let data = simulate_continuous(&theta, &model, &design, 99).unwrap();
        let vals: Vec<f64> = data
            .iter()
            .map(|d| match &d.observations {
                Observations::Continuous { values, .. } => values[0],
                _ => unreachable!(),
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let expect_sd = (0.49f64 + 0.25).sqrt();
        assert!(mean.abs() < 0.02 * expect_sd.max(1.0), "mean {mean}");
        assert!((sd - expect_sd).abs() < 0.02 * expect_sd, "sd {sd}");
    }

    #[test]
    fn simulate_is_deterministic_in_seed() {
        let pop = flat_pop(1, 1.0);
        let theta = Theta::new(pop, Some(ErrorModel::constant(0.5).unwrap()));
        let model = LinearModel::new(DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));
        let design = ContinuousDesign::replicate(5, vec![0.0, 1.0], 0.0);
        let a = simulate_continuous(&theta, &model, &design, 7).unwrap();
        let b = simulate_continuous(&theta, &model, &design, 7).unwrap();
        assert_eq!(a, b);
        let c = simulate_continuous(&theta, &model, &design, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tte_first_event_times_match_weibull_law() {
        // Degenerate prior: every individual at psi_pop, so first events are
        // iid Weibull(lambda, beta). Kolmogorov-Smirnov at the 1% level.
        let (lam, beta) = (10.0, 3.0);
        let pop = PopulationModel::gaussian(
            vec![lam, beta],
            DMatrix::identity(2, 2) * 1e-12,
            vec![Transform::Identity, Transform::Identity],
        )
        .unwrap();
        let theta = Theta::new(pop, None);
        let design = TteDesign::replicate(4000, 1e6);
        let data = simulate_tte(&theta, &WeibullHazard, &design, 4).unwrap();
        let mut firsts: Vec<f64> = data
            .iter()
            .filter_map(|d| match &d.observations {
                Observations::TimeToEvent { event_times, .. } => event_times.first().copied(),
                _ => None,
            })
            .collect();
        assert!(firsts.len() > 3990, "almost all individuals must have events");
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = firsts.len() as f64;
        let mut ks: f64 = 0.0;
        for (i, t) in firsts.iter().enumerate() {
            let cdf = 1.0 - (-(t / lam).powf(beta)).exp();
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            ks = ks.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        let critical = 1.628 / n.sqrt();
        assert!(ks < critical, "KS statistic {ks} exceeds {critical}");
    }

    #[test]
    fn tte_event_times_are_strictly_increasing_and_censored() {
        let pop = PopulationModel::gaussian(
            vec![10.0f64.ln(), 3.0f64.ln()],
            DMatrix::identity(2, 2) * 0.09,
            vec![Transform::Log, Transform::Log],
        )
        .unwrap();
        let theta = Theta::new(pop, None);
        let design = TteDesign::replicate(50, 20.0);
        let data = simulate_tte(&theta, &WeibullHazard, &design, 12).unwrap();
        for d in &data {
            match &d.observations {
                Observations::TimeToEvent {
                    event_times,
                    censored,
                    censor_time,
                } => {
                    assert!(censored);
                    assert_eq!(*censor_time, 20.0);
                    for w in event_times.windows(2) {
                        assert!(w[1] > w[0]);
                    }
                    assert!(event_times.iter().all(|&t| t <= 20.0));
                }
                _ => panic!("expected TTE data"),
            }
        }
    }

    #[test]
    fn generic_bisection_matches_closed_form_inversion() {
        // Drop the closed-form inverse and compare the bisection path.
        struct NoInvert;
        impl Hazard for NoInvert {
            fn name(&self) -> &str {
                "weibull-noinv"
            }
            fn dim(&self) -> usize {
                2
            }
            fn hazard(&self, t: f64, psi: &[f64]) -> Result<f64> {
                WeibullHazard.hazard(t, psi)
            }
            fn hazard_dual(&self, t: f64, psi: &[Dual]) -> Result<Dual> {
                WeibullHazard.hazard_dual(t, psi)
            }
            fn cum_hazard(&self, t: f64, psi: &[f64]) -> Result<Option<f64>> {
                WeibullHazard.cum_hazard(t, psi)
            }
        }
        let psi = [10.0, 3.0];
        for target in [0.1, 0.5, 2.0] {
            let closed = WeibullHazard.invert_cum_hazard(target, &psi).unwrap().unwrap();
            let bis = bisect_cum_hazard(&NoInvert, &psi, 0.0, 100.0, target)
                .unwrap()
                .unwrap();
            assert!((closed - bis).abs() < 1e-8, "{closed} vs {bis}");
        }
    }

    #[test]
    fn arc_trait_objects_are_send_sync() {
        fn takes_send_sync<T: Send + Sync>(_t: T) {}
        takes_send_sync(Arc::new(Pk1Oral) as Arc<dyn Structural>);
        takes_send_sync(Arc::new(WeibullHazard) as Arc<dyn Hazard>);
    }
}
