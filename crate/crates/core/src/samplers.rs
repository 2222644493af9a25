//! Markov kernels over an individual's working-scale parameter vector.
//!
//! Every kernel targets the joint density `p(y_i, phi_i)` of one individual,
//! so acceptance ratios never need transform Jacobians. A chain is strictly
//! sequential and owns a counter-based RNG stream derived from the master
//! seed and the individual id, which makes runs reproducible regardless of
//! how individuals are scheduled across threads.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::likelihood::{ObservationModel, Posterior};
use crate::map_laplace::{
    compute_map, laplace_proposal, linearized_proposal, GaussianProposal, ProposalFamily,
};
use crate::rng::stream_rng;

/// Minimum random-walk scale; adaptation never shrinks a proposal below this.
pub const MIN_RWM_SCALE: f64 = 1e-8;

const LN_MIN_RWM_SCALE: f64 = -18.420680743952367; // ln(1e-8)

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Transition kernel selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Kernel {
    /// Independent proposals from the individual prior.
    PriorImh,
    /// One adaptive Gaussian move per coordinate per iteration.
    RwmComponentwise,
    /// One adaptive joint Gaussian move per iteration.
    RwmBlockwise,
    /// Component sweep followed by a block move each iteration.
    RwmCycle,
    /// Langevin proposal with drift `stepsize * grad log p`.
    Mala { stepsize: f64 },
    /// Independent proposals from the MAP-centered approximation of the
    /// conditional: linearization for continuous data, curvature otherwise.
    NlmeImh { family: ProposalFamily },
}

impl Kernel {
    pub fn tag(&self) -> &'static str {
        match self {
            Kernel::PriorImh => "prior_imh",
            Kernel::RwmComponentwise => "rwm_componentwise",
            Kernel::RwmBlockwise => "rwm_blockwise",
            Kernel::RwmCycle => "rwm_cycle",
            Kernel::Mala { .. } => "mala",
            Kernel::NlmeImh { .. } => "nlme_imh",
        }
    }
}

/// How the chain's first state is chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum ChainInit {
    PriorMean,
    PriorDraw,
    /// Start at the individual MAP (found from the prior mean).
    Map,
    Explicit(Vec<f64>),
}

/// Run parameters for a single-individual chain.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub kernel: Kernel,
    pub n_iter: usize,
    pub seed: u64,
    pub init: ChainInit,
    /// Gradient tolerance for MAP solves used by this chain.
    pub map_tol: f64,
    pub map_max_iter: usize,
}

impl SamplerConfig {
    pub fn new(kernel: Kernel, n_iter: usize, seed: u64) -> Self {
        SamplerConfig {
            kernel,
            n_iter,
            seed,
            init: ChainInit::PriorMean,
            map_tol: 1e-6,
            map_max_iter: 200,
        }
    }

    pub fn with_init(mut self, init: ChainInit) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Kernel::Mala { stepsize } = self.kernel {
            if !(stepsize > 0.0) || !stepsize.is_finite() {
                return Err(Error::Config(format!(
                    "mala stepsize must be positive, got {stepsize}"
                )));
            }
        }
        if let Kernel::NlmeImh { family: ProposalFamily::Student { dof } } = self.kernel {
            if !(dof > 0.0) {
                return Err(Error::Config(format!("student dof must be positive, got {dof}")));
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
}

// ---------------------------------------------------------------------------
// Adaptation state
// ---------------------------------------------------------------------------

/// Robbins-Monro scale adaptation for the random-walk kernels. The state
/// survives across runs so SAEM can keep adapting the same individual's
/// proposal from one outer iteration to the next.
#[derive(Clone, Debug)]
pub struct RwmAdaptState {
    /// Per-coordinate log standard deviations of the componentwise proposal.
    pub log_scales: DVector<f64>,
    /// Extra log factor applied to all coordinates in the block move.
    pub block_log_scale: f64,
    pub target_comp: f64,
    pub target_block: f64,
    /// Moves per adaptation update; 1 adapts after every move.
    pub window: usize,
    comp_updates: Vec<u64>,
    block_updates: u64,
    comp_window: Vec<(u64, u64)>,
    block_window: (u64, u64),
}

impl RwmAdaptState {
    /// Initial scales follow the prior standard deviations; the block factor
    /// starts at the classical `2.38 / sqrt(p)`.
    pub fn new(prior_sds: &[f64]) -> Self {
        let p = prior_sds.len();
        let log_scales = DVector::from_iterator(
            p,
            prior_sds.iter().map(|&s| s.max(MIN_RWM_SCALE).ln()),
        );
        RwmAdaptState {
            log_scales,
            block_log_scale: (2.38 / (p.max(1) as f64).sqrt()).ln(),
            target_comp: 0.44,
            target_block: 0.234,
            window: 1,
            comp_updates: vec![0; p],
            block_updates: 0,
            comp_window: vec![(0, 0); p],
            block_window: (0, 0),
        }
    }

    pub fn for_posterior(post: &Posterior) -> Self {
        let omega = post.population.omega();
        let sds: Vec<f64> = (0..post.dim()).map(|j| omega[(j, j)].sqrt()).collect();
        RwmAdaptState::new(&sds)
    }

    pub fn comp_scale(&self, j: usize) -> f64 {
        self.log_scales[j].exp()
    }

    pub fn block_scale(&self, j: usize) -> f64 {
        (self.log_scales[j] + self.block_log_scale).exp()
    }

    /// Record one componentwise move and adapt when the window fills.
    pub fn record_comp(&mut self, j: usize, accepted: bool) {
        let (n, a) = &mut self.comp_window[j];
        *n += 1;
        *a += accepted as u64;
        if *n >= self.window as u64 {
            let rate = *a as f64 / *n as f64;
            self.comp_window[j] = (0, 0);
            self.comp_updates[j] += 1;
            let gain = (self.comp_updates[j] as f64).powf(-0.6);
            self.log_scales[j] =
                (self.log_scales[j] + gain * (rate - self.target_comp)).max(LN_MIN_RWM_SCALE);
        }
    }

    /// Record one block move and adapt when the window fills.
    pub fn record_block(&mut self, accepted: bool) {
        let (n, a) = &mut self.block_window;
        *n += 1;
        *a += accepted as u64;
        if *n >= self.window as u64 {
            let rate = *a as f64 / *n as f64;
            self.block_window = (0, 0);
            self.block_updates += 1;
            let gain = (self.block_updates as f64).powf(-0.6);
            let floor = LN_MIN_RWM_SCALE - self.log_scales.min();
            self.block_log_scale =
                (self.block_log_scale + gain * (rate - self.target_block)).max(floor);
        }
    }
}

// ---------------------------------------------------------------------------
// Chain state and trace
// ---------------------------------------------------------------------------

/// Current point of one chain with its cached evaluations.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub phi: DVector<f64>,
    pub log_target: f64,
    /// Gradient of the log target at `phi`, cached by the Langevin kernel.
    grad: Option<DVector<f64>>,
}

impl ChainState {
    /// Evaluate the target at `phi` and refuse states of zero density.
    pub fn at(post: &Posterior, phi: DVector<f64>) -> Result<Self> {
        let log_target = post.log_density(&phi)?;
        if !log_target.is_finite() {
            return Err(Error::InvalidState(format!(
                "log target is {log_target} at the initial state"
            )));
        }
        Ok(ChainState {
            phi,
            log_target,
            grad: None,
        })
    }
}

/// Recorded history of one chain. One entry per outer iteration; composite
/// kernels (cycles) record the state after the full sweep.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    pub init: DVector<f64>,
    pub samples: Vec<DVector<f64>>,
    pub accepted: Vec<bool>,
    pub log_target: Vec<f64>,
    pub kernel_tags: Vec<&'static str>,
    /// Acceptance log-ratio of the iteration's proposal for single-move
    /// kernels; NaN for composite sweeps.
    pub log_alpha: Vec<f64>,
    /// The requested kernel could not be built and the chain degraded to
    /// `rwm_cycle`.
    pub fallback: bool,
    /// Elementary proposals attempted (a cycle iteration counts p+1).
    pub move_proposals: u64,
    pub move_accepts: u64,
}

impl ChainTrace {
    fn with_capacity(init: DVector<f64>, n: usize) -> Self {
        ChainTrace {
            init,
            samples: Vec::with_capacity(n),
            accepted: Vec::with_capacity(n),
            log_target: Vec::with_capacity(n),
            kernel_tags: Vec::with_capacity(n),
            log_alpha: Vec::with_capacity(n),
            fallback: false,
            move_proposals: 0,
            move_accepts: 0,
        }
    }

    fn push(&mut self, state: &ChainState, rec: &StepRecord, tag: &'static str) {
        self.samples.push(state.phi.clone());
        self.accepted.push(rec.accepted);
        self.log_target.push(state.log_target);
        self.kernel_tags.push(tag);
        self.log_alpha.push(rec.log_alpha);
        self.move_proposals += rec.moves;
        self.move_accepts += rec.accepts;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }

    /// Fraction of elementary proposals accepted.
    pub fn acceptance_rate(&self) -> f64 {
        if self.move_proposals == 0 {
            return 0.0;
        }
        self.move_accepts as f64 / self.move_proposals as f64
    }

    /// One coordinate of the chain as a plain vector.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[j]).collect()
    }

    /// Final state (the initial state when no iterations ran).
    pub fn last(&self) -> &DVector<f64> {
        self.samples.last().unwrap_or(&self.init)
    }
}

// ---------------------------------------------------------------------------
// Generic MH transition
// ---------------------------------------------------------------------------

/// Outcome of one elementary Metropolis-Hastings move.
#[derive(Clone, Debug)]
pub struct MhOutcome {
    pub state: DVector<f64>,
    pub log_target: f64,
    pub accepted: bool,
    pub log_alpha: f64,
}

/// One Metropolis-Hastings transition from `state`.
///
/// `log_q` maps the candidate to the pair (log q(candidate | state),
/// log q(state | candidate)); for symmetric proposals both entries may be 0.
/// Evaluation failures or zero density at the candidate reject the move;
/// zero density at the current state is an invalid-state error.
pub fn mh_step<R: Rng + ?Sized>(
    state: &DVector<f64>,
    state_log_target: f64,
    candidate: DVector<f64>,
    log_q: impl FnOnce(&DVector<f64>) -> (f64, f64),
    target: impl FnOnce(&DVector<f64>) -> Result<f64>,
    rng: &mut R,
) -> Result<MhOutcome> {
    if !state_log_target.is_finite() {
        return Err(Error::InvalidState(format!(
            "log target is {state_log_target} at the current state"
        )));
    }
    let cand_log_target = match target(&candidate) {
        Ok(v) if v.is_nan() => {
            return Err(Error::Numerical("log target evaluated to NaN".into()))
        }
        Ok(v) => v,
        Err(Error::Eval { .. }) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };
    let (log_q_fwd, log_q_rev) = log_q(&candidate);
    let log_alpha = (cand_log_target - state_log_target) + (log_q_rev - log_q_fwd);
    let accepted = rng.gen::<f64>().ln() < log_alpha;
    if accepted {
        Ok(MhOutcome {
            state: candidate,
            log_target: cand_log_target,
            accepted: true,
            log_alpha,
        })
    } else {
        Ok(MhOutcome {
            state: state.clone_owned(),
            log_target: state_log_target,
            accepted: false,
            log_alpha,
        })
    }
}

// ---------------------------------------------------------------------------
// Kernel driver
// ---------------------------------------------------------------------------

/// Per-iteration accounting returned by a kernel step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    /// Whether the recorded state differs from the previous one.
    pub accepted: bool,
    /// Log acceptance ratio for single-proposal kernels, NaN otherwise.
    pub log_alpha: f64,
    pub moves: u64,
    pub accepts: u64,
}

/// A kernel bound to one individual: frozen proposal machinery plus the
/// fallback decision. Built once per chain (or once per SAEM outer iteration)
/// so the MAP solve is not repeated at every transition.
pub struct KernelDriver {
    requested: Kernel,
    effective: Kernel,
    proposal: Option<GaussianProposal>,
    pub fallback: bool,
}

impl KernelDriver {
    /// Resolve the kernel at the current state. For the independence sampler
    /// this runs the MAP solve and builds the proposal; a failed or
    /// non-converged solve degrades the chain to `rwm_cycle`.
    pub fn prepare(
        post: &Posterior,
        kernel: Kernel,
        state: &ChainState,
        map_tol: f64,
        map_max_iter: usize,
    ) -> Result<Self> {
        let mut driver = KernelDriver {
            requested: kernel,
            effective: kernel,
            proposal: None,
            fallback: false,
        };
        if let Kernel::NlmeImh { family } = kernel {
            let built = compute_map(post, &state.phi, map_tol, map_max_iter)
                .ok()
                .filter(|map| map.converged)
                .and_then(|map| {
                    let base = match post.obs {
                        ObservationModel::Continuous { .. } => {
                            linearized_proposal(post, &map.phi)
                        }
                        ObservationModel::TimeToEvent { .. } => laplace_proposal(post, &map.phi),
                    };
                    base.and_then(|p| p.with_family(family)).ok()
                });
            match built {
                Some(p) => driver.proposal = Some(p),
                None => {
                    driver.effective = Kernel::RwmCycle;
                    driver.fallback = true;
                }
            }
        }
        Ok(driver)
    }

    pub fn tag(&self) -> &'static str {
        self.effective.tag()
    }

    pub fn requested(&self) -> Kernel {
        self.requested
    }

    pub fn effective(&self) -> Kernel {
        self.effective
    }

    pub fn proposal(&self) -> Option<&GaussianProposal> {
        self.proposal.as_ref()
    }

    /// Advance the chain by one recorded iteration.
    pub fn step(
        &self,
        post: &Posterior,
        state: &mut ChainState,
        adapt: &mut RwmAdaptState,
        rng: &mut ChaCha12Rng,
    ) -> Result<StepRecord> {
        match self.effective {
            Kernel::PriorImh => self.step_prior_imh(post, state, rng),
            Kernel::RwmComponentwise => self.step_rwm(post, state, adapt, rng, true, false),
            Kernel::RwmBlockwise => self.step_rwm(post, state, adapt, rng, false, true),
            Kernel::RwmCycle => self.step_rwm(post, state, adapt, rng, true, true),
            Kernel::Mala { stepsize } => self.step_mala(post, state, rng, stepsize),
            Kernel::NlmeImh { .. } => self.step_nlme_imh(post, state, rng),
        }
    }

    fn step_prior_imh(
        &self,
        post: &Posterior,
        state: &mut ChainState,
        rng: &mut ChaCha12Rng,
    ) -> Result<StepRecord> {
        let candidate = post.population.draw_prior(post.individual, rng)?;
        let out = mh_step(
            &state.phi,
            state.log_target,
            candidate,
            |c| {
                let fwd = post
                    .population
                    .prior_logpdf(c, post.individual)
                    .unwrap_or(f64::NEG_INFINITY);
                let rev = post
                    .population
                    .prior_logpdf(&state.phi, post.individual)
                    .unwrap_or(f64::NEG_INFINITY);
                (fwd, rev)
            },
            |c| post.log_density(c),
            rng,
        )?;
        apply(state, out)
    }

    fn step_rwm(
        &self,
        post: &Posterior,
        state: &mut ChainState,
        adapt: &mut RwmAdaptState,
        rng: &mut ChaCha12Rng,
        componentwise: bool,
        block: bool,
    ) -> Result<StepRecord> {
        let p = post.dim();
        let mut moves = 0;
        let mut accepts = 0;
        let mut any = false;
        let mut last_alpha = f64::NAN;
        if componentwise {
            for j in 0..p {
                let mut candidate = state.phi.clone();
                candidate[j] += adapt.comp_scale(j) * rng.sample::<f64, _>(StandardNormal);
                let out = mh_step(
                    &state.phi,
                    state.log_target,
                    candidate,
                    |_| (0.0, 0.0),
                    |c| post.log_density(c),
                    rng,
                )?;
                adapt.record_comp(j, out.accepted);
                moves += 1;
                accepts += out.accepted as u64;
                any |= out.accepted;
                state.phi = out.state;
                state.log_target = out.log_target;
            }
        }
        if block {
            let mut candidate = state.phi.clone();
            for j in 0..p {
                candidate[j] += adapt.block_scale(j) * rng.sample::<f64, _>(StandardNormal);
            }
            let out = mh_step(
                &state.phi,
                state.log_target,
                candidate,
                |_| (0.0, 0.0),
                |c| post.log_density(c),
                rng,
            )?;
            adapt.record_block(out.accepted);
            moves += 1;
            accepts += out.accepted as u64;
            any |= out.accepted;
            last_alpha = out.log_alpha;
            state.phi = out.state;
            state.log_target = out.log_target;
        }
        state.grad = None;
        Ok(StepRecord {
            accepted: any,
            log_alpha: if moves == 1 { last_alpha } else { f64::NAN },
            moves,
            accepts,
        })
    }

    fn step_mala(
        &self,
        post: &Posterior,
        state: &mut ChainState,
        rng: &mut ChaCha12Rng,
        stepsize: f64,
    ) -> Result<StepRecord> {
        if state.grad.is_none() {
            let (_, g) = post.grad(&state.phi)?;
            state.grad = Some(g);
        }
        let grad_x = state.grad.as_ref().expect("cached above").clone();
        let p = post.dim();
        let sd = (2.0 * stepsize).sqrt();
        let mean_fwd = &state.phi + &grad_x * stepsize;
        let candidate = DVector::from_iterator(
            p,
            (0..p).map(|j| mean_fwd[j] + sd * rng.sample::<f64, _>(StandardNormal)),
        );
        // The reverse drift needs the gradient at the candidate; a failure
        // here aborts the chain rather than silently rejecting.
        let (cand_log_target, grad_c) = post.grad(&candidate)?;
        if cand_log_target.is_nan() {
            return Err(Error::Numerical("log target evaluated to NaN".into()));
        }
        let log_q_fwd = mala_log_q(&state.phi, &candidate, &grad_x, stepsize);
        let log_q_rev = mala_log_q(&candidate, &state.phi, &grad_c, stepsize);
        let log_alpha = (cand_log_target - state.log_target) + (log_q_rev - log_q_fwd);
        let accepted = rng.gen::<f64>().ln() < log_alpha;
        if accepted {
            state.phi = candidate;
            state.log_target = cand_log_target;
            state.grad = Some(grad_c);
        }
        Ok(StepRecord {
            accepted,
            log_alpha,
            moves: 1,
            accepts: accepted as u64,
        })
    }

    fn step_nlme_imh(
        &self,
        post: &Posterior,
        state: &mut ChainState,
        rng: &mut ChaCha12Rng,
    ) -> Result<StepRecord> {
        let proposal = self.proposal.as_ref().expect("prepared for nlme_imh");
        let candidate = proposal.draw(rng);
        let out = mh_step(
            &state.phi,
            state.log_target,
            candidate,
            |c| (proposal.logpdf(c), proposal.logpdf(&state.phi)),
            |c| post.log_density(c),
            rng,
        )?;
        apply(state, out)
    }
}

fn apply(state: &mut ChainState, out: MhOutcome) -> Result<StepRecord> {
    let rec = StepRecord {
        accepted: out.accepted,
        log_alpha: out.log_alpha,
        moves: 1,
        accepts: out.accepted as u64,
    };
    state.phi = out.state;
    state.log_target = out.log_target;
    state.grad = None;
    Ok(rec)
}

/// Log density of the Langevin proposal `N(from + stepsize * grad, 2 stepsize I)`
/// evaluated at `to`, normalizer included.
pub fn mala_log_q(
    from: &DVector<f64>,
    to: &DVector<f64>,
    grad_at_from: &DVector<f64>,
    stepsize: f64,
) -> f64 {
    let p = from.len() as f64;
    let var = 2.0 * stepsize;
    let mean = from + grad_at_from * stepsize;
    let r = to - mean;
    -0.5 * p * (var * 2.0 * std::f64::consts::PI).ln() - r.norm_squared() / (2.0 * var)
}

// ---------------------------------------------------------------------------
// Chain runners
// ---------------------------------------------------------------------------

fn resolve_init(
    post: &Posterior,
    config: &SamplerConfig,
    rng: &mut ChaCha12Rng,
) -> Result<DVector<f64>> {
    match &config.init {
        ChainInit::PriorMean => post.population.prior_mean(post.individual),
        ChainInit::PriorDraw => post.population.draw_prior(post.individual, rng),
        ChainInit::Map => {
            let start = post.population.prior_mean(post.individual)?;
            Ok(compute_map(post, &start, config.map_tol, config.map_max_iter)?.phi)
        }
        ChainInit::Explicit(v) => {
            if v.len() != post.dim() {
                return Err(Error::Invalid(format!(
                    "explicit init has dimension {}, expected {}",
                    v.len(),
                    post.dim()
                )));
            }
            Ok(DVector::from_column_slice(v))
        }
    }
}

/// Run a chain with externally owned adaptation state.
pub fn run_sampler_with(
    post: &Posterior,
    config: &SamplerConfig,
    adapt: &mut RwmAdaptState,
) -> Result<ChainTrace> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, &post.individual.id, 0);
    let init = resolve_init(post, config, &mut rng)?;
    let mut state = ChainState::at(post, init)?;
    let driver = KernelDriver::prepare(post, config.kernel, &state, config.map_tol, config.map_max_iter)?;
    let mut trace = ChainTrace::with_capacity(state.phi.clone(), config.n_iter);
    trace.fallback = driver.fallback;
    for _ in 0..config.n_iter {
        let rec = driver.step(post, &mut state, adapt, &mut rng)?;
        trace.push(&state, &rec, driver.tag());
    }
    Ok(trace)
}

/// Run any kernel with fresh adaptation state.
pub fn run_sampler(post: &Posterior, config: &SamplerConfig) -> Result<ChainTrace> {
    let mut adapt = RwmAdaptState::for_posterior(post);
    run_sampler_with(post, config, &mut adapt)
}

/// Independence sampler whose proposal is the individual prior.
pub fn run_prior_imh(post: &Posterior, config: &SamplerConfig) -> Result<ChainTrace> {
    expect_kernel(config, "prior_imh")?;
    run_sampler(post, config)
}

/// Adaptive random-walk kernels; `adapt` persists across calls.
pub fn run_rwm(
    post: &Posterior,
    config: &SamplerConfig,
    adapt: &mut RwmAdaptState,
) -> Result<ChainTrace> {
    match config.kernel {
        Kernel::RwmComponentwise | Kernel::RwmBlockwise | Kernel::RwmCycle => {}
        other => {
            return Err(Error::Config(format!(
                "run_rwm needs a random-walk kernel, got {}",
                other.tag()
            )))
        }
    }
    run_sampler_with(post, config, adapt)
}

/// Langevin kernel.
pub fn run_mala(post: &Posterior, config: &SamplerConfig) -> Result<ChainTrace> {
    expect_kernel(config, "mala")?;
    run_sampler(post, config)
}

/// MAP-proposal independence sampler.
pub fn run_nlme_imh(post: &Posterior, config: &SamplerConfig) -> Result<ChainTrace> {
    expect_kernel(config, "nlme_imh")?;
    run_sampler(post, config)
}

fn expect_kernel(config: &SamplerConfig, tag: &str) -> Result<()> {
    if config.kernel.tag() != tag {
        return Err(Error::Config(format!(
            "expected kernel {tag}, got {}",
            config.kernel.tag()
        )));
    }
    Ok(())
}
