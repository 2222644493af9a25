//! MAP estimation and Gaussian proposal construction.
//!
//! The individual MAP is found by BFGS with Armijo backtracking on the joint
//! log density. Proposals come in two flavours: a Laplace proposal from the
//! curvature of the joint at the mode, and a linearized proposal from the
//! Jacobian of the structural model (exact for linear models, and the cheap
//! choice for continuous data).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::likelihood::Posterior;

const LN_2PI: f64 = 1.8378770664093453;

/// Smallest eigenvalue allowed in a proposal covariance.
pub const SPD_FLOOR: f64 = 1e-8;

// ---------------------------------------------------------------------------
// MAP estimation
// ---------------------------------------------------------------------------

/// Outcome of an individual MAP search.
#[derive(Clone, Debug)]
pub struct MapResult {
    /// Maximizer of the joint log density.
    pub phi: DVector<f64>,
    /// Joint log density at `phi`.
    pub value: f64,
    /// Euclidean norm of the joint gradient at `phi`.
    pub grad_norm: f64,
    /// Whether `grad_norm` reached the requested tolerance.
    pub converged: bool,
    /// Iterations spent.
    pub iterations: usize,
}

/// Maximize `log p(y_i, phi)` by BFGS from `init`.
///
/// Evaluation failures at the initial point are reported as errors; failures
/// at trial points during the search only shorten the step. Non-convergence
/// within `max_iter` iterations is flagged on the result, not fatal.
pub fn compute_map(
    post: &Posterior,
    init: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<MapResult> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let p = post.dim();
    if init.len() != p {
        return Err(Error::Invalid(format!(
            "initial point has dimension {}, expected {p}",
            init.len()
        )));
    }
    let mut x = init.clone();
    let (mut value, mut grad) = post.grad(&x).map(|(v, g)| (-v, -g))?;
    if !value.is_finite() {
        return Err(Error::InvalidState(
            "joint log density is not finite at the initial point".into(),
        ));
    }
    let mut inv_hess = DMatrix::identity(p, p);
    let mut iterations = 0;
    let mut converged = grad.norm() < tol;

    while !converged && iterations < max_iter {
        iterations += 1;
        let mut dir = -(&inv_hess * &grad);
        if dir.dot(&grad) >= 0.0 {
            // Curvature information went stale; fall back to steepest descent.
            inv_hess = DMatrix::identity(p, p);
            dir = -grad.clone();
        }
        let slope = grad.dot(&dir);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-16 {
            let trial = &x + &dir * alpha;
            match post.grad(&trial) {
                Ok((v, g)) if (-v).is_finite() && -v <= value + 1e-4 * alpha * slope => {
                    accepted = Some((trial, -v, -g));
                    break;
                }
                _ => alpha *= 0.5,
            }
        }
        let Some((x_new, value_new, grad_new)) = accepted else {
            break; // line search stalled; report the best point found
        };
        let s = &x_new - &x;
        let stalled = s.norm() <= 1e-14 * (1.0 + x.norm());
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-10 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &inv_hess * &y;
            let yhy = y.dot(&hy);
            // BFGS inverse update: H += (sy + yHy) ssᵀ/sy² − (Hy sᵀ + s yᵀH)/sy
            inv_hess += &s * s.transpose() * ((sy + yhy) * rho * rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        x = x_new;
        value = value_new;
        grad = grad_new;
        converged = grad.norm() < tol;
        if stalled {
            break; // steps collapsed to rounding; only curvature can finish
        }
    }

    // The Armijo test needs value decreases of order |grad|^2, which drop
    // below float resolution long before a tight gradient tolerance is met.
    // Newton steps on the joint curvature converge quadratically from here;
    // accept them only while the gradient norm shrinks.
    let mut polish = 0;
    while !converged && polish < 30 {
        polish += 1;
        iterations += 1;
        let Ok(hess) = post.hess(&x) else { break };
        let Some(step) = (-hess).lu().solve(&grad) else { break };
        let trial = &x - &step;
        let Ok((value_new, grad_new)) = post.grad(&trial).map(|(v, g)| (-v, -g)) else { break };
        if !value_new.is_finite() || grad_new.norm() >= grad.norm() {
            break;
        }
        x = trial;
        value = value_new;
        grad = grad_new;
        converged = grad.norm() < tol;
    }

    Ok(MapResult {
        phi: x,
        value: -value,
        grad_norm: grad.norm(),
        converged,
        iterations,
    })
}

// ---------------------------------------------------------------------------
// Proposal distributions
// ---------------------------------------------------------------------------

/// Family of the independent proposal built on a mean/covariance pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ProposalFamily {
    Gaussian,
    /// Multivariate Student with `dof` degrees of freedom and the covariance
    /// matrix as shape; heavier tails, same location.
    Student { dof: f64 },
}

/// Frozen independent proposal: mean, covariance, its Cholesky factor, and
/// the log-density machinery for both supported families.
#[derive(Clone, Debug)]
pub struct GaussianProposal {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    family: ProposalFamily,
    /// Set when the covariance needed an eigenvalue floor to become SPD.
    pub repaired: bool,
}

impl GaussianProposal {
    /// Build from a mean and covariance. The covariance is symmetrized and,
    /// if not positive definite, repaired by flooring its eigenvalues.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::Invalid(format!(
                "covariance is {}x{}, expected {p}x{p}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if cov.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("proposal covariance is not finite".into()));
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let (spd, repaired) = make_spd(&sym);
        let chol = Cholesky::new(spd.clone())
            .ok_or_else(|| Error::Numerical("covariance not positive definite after repair".into()))?;
        Ok(GaussianProposal {
            mean,
            cov: spd,
            chol: chol.l(),
            family: ProposalFamily::Gaussian,
            repaired,
        })
    }

    /// Same location and scale under a different family.
    pub fn with_family(mut self, family: ProposalFamily) -> Result<Self> {
        if let ProposalFamily::Student { dof } = family {
            if !(dof > 0.0) {
                return Err(Error::Config(format!("Student dof must be positive, got {dof}")));
            }
        }
        self.family = family;
        Ok(self)
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn family(&self) -> ProposalFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_det_chol(&self) -> f64 {
        (0..self.dim()).map(|j| self.chol[(j, j)].ln()).sum()
    }

    /// Squared Mahalanobis distance through the Cholesky factor.
    fn mahalanobis2(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        let z = self
            .chol
            .solve_lower_triangular(&r)
            .expect("cholesky factor is invertible");
        z.norm_squared()
    }

    /// Log density of the proposal at `x`.
    pub fn logpdf(&self, x: &DVector<f64>) -> f64 {
        let p = self.dim() as f64;
        let m2 = self.mahalanobis2(x);
        match self.family {
            ProposalFamily::Gaussian => -0.5 * p * LN_2PI - self.log_det_chol() - 0.5 * m2,
            ProposalFamily::Student { dof } => {
                ln_gamma(0.5 * (dof + p)) - ln_gamma(0.5 * dof)
                    - 0.5 * p * (dof * std::f64::consts::PI).ln()
                    - self.log_det_chol()
                    - 0.5 * (dof + p) * (1.0 + m2 / dof).ln()
            }
        }
    }

    /// Draw one sample.
    pub fn draw(&self, rng: &mut impl Rng) -> DVector<f64> {
        let p = self.dim();
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let scaled = &self.chol * z;
        match self.family {
            ProposalFamily::Gaussian => &self.mean + scaled,
            ProposalFamily::Student { dof } => {
                let w = ChiSquared::new(dof).expect("dof validated").sample(rng);
                &self.mean + scaled * (dof / w).sqrt()
            }
        }
    }
}

/// Symmetrize and floor the eigenvalues of `mat` at `SPD_FLOOR`. The flag
/// reports whether any eigenvalue actually moved.
pub fn make_spd(mat: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if let Some(chol) = Cholesky::new(mat.clone()) {
        // Already SPD; cheap path. Guard against near-singular factors anyway.
        if (0..mat.nrows()).all(|j| chol.l()[(j, j)] * chol.l()[(j, j)] >= SPD_FLOOR * 1e-3) {
            return (mat.clone(), false);
        }
    }
    let eig = SymmetricEigen::new(mat.clone());
    let mut vals = eig.eigenvalues.clone();
    let mut repaired = false;
    for v in vals.iter_mut() {
        if *v < SPD_FLOOR {
            *v = SPD_FLOOR;
            repaired = true;
        }
    }
    let q = &eig.eigenvectors;
    let fixed = q * DMatrix::from_diagonal(&vals) * q.transpose();
    ((&fixed + fixed.transpose()) * 0.5, repaired)
}

// ---------------------------------------------------------------------------
// Proposal builders
// ---------------------------------------------------------------------------

/// Laplace proposal at the mode: covariance `(-H_cond(phi_hat) + Omega^-1)^-1`
/// and mean `phi_hat`. Works for any observation model with a twice
/// differentiable conditional log-likelihood.
pub fn laplace_proposal(post: &Posterior, phi_hat: &DVector<f64>) -> Result<GaussianProposal> {
    let h_cond = post.hess_cond(phi_hat)?;
    let prec = -h_cond + post.population.omega_inv();
    let cov = invert_spd(&prec)?;
    GaussianProposal::new(phi_hat.clone(), cov)
}

/// Linearized proposal for continuous data: with `J` the Jacobian of the
/// predictions at `phi_hat` and `Sigma = diag(g^2)`, the covariance is
/// `(Jᵀ Sigma^-1 J + Omega^-1)^-1` and the mean takes one Gauss-Newton step
/// from `phi_hat`, which reproduces the exact conditional for linear models.
pub fn linearized_proposal(post: &Posterior, phi_hat: &DVector<f64>) -> Result<GaussianProposal> {
    let (preds, jac, sds) = post.linearize(phi_hat)?;
    let values = match &post.individual.observations {
        crate::model::Observations::Continuous { values, .. } => values,
        _ => unreachable!("linearize only succeeds on continuous data"),
    };
    let p = post.dim();
    let mut prec = post.population.omega_inv().clone_owned();
    let mut score = DVector::zeros(p);
    for i in 0..preds.len() {
        let w = 1.0 / (sds[i] * sds[i]);
        let row = jac.row(i).transpose();
        prec += &row * row.transpose() * w;
        score += row * ((values[i] - preds[i]) * w);
    }
    let m = post.population.prior_mean(post.individual)?;
    score += post.population.omega_inv() * (m - phi_hat);
    let cov = invert_spd(&prec)?;
    let mean = phi_hat + &cov * score;
    GaussianProposal::new(mean, cov)
}

/// Exact conditional distribution of `phi` given `y = A phi + eps` with
/// `eps ~ N(0, sigma2 I)` and prior `N(m, omega)`.
pub fn exact_linear_conditional(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    m: &DVector<f64>,
    omega: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(sigma2 > 0.0) {
        return Err(Error::Invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    if a.nrows() != y.len() || a.ncols() != m.len() {
        return Err(Error::Invalid(format!(
            "design is {}x{}, data has {} rows and prior dimension {}",
            a.nrows(),
            a.ncols(),
            y.len(),
            m.len()
        )));
    }
    let omega_inv = invert_spd(omega)?;
    let prec = a.transpose() * a / sigma2 + &omega_inv;
    let cov = invert_spd(&prec)?;
    let mean = &cov * (a.transpose() * y / sigma2 + omega_inv * m);
    Ok((mean, cov))
}

fn invert_spd(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (mat + mat.transpose()) * 0.5;
    Cholesky::new(sym)
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}
