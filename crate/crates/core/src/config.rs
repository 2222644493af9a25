//! Run configuration: the JSON schema consumed by the command-line driver
//! and the built-in model presets.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{ErrorModel, ObservationModel};
use crate::map_laplace::ProposalFamily;
use crate::model::{PopulationModel, Theta};
use crate::models::{default_pk_times, Pk1Oral, WeibullHazard};
use crate::samplers::Kernel;
use crate::transform::Transform;

/// Observation design used when simulating datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignConfig {
    Continuous { times: Vec<f64>, dose: f64 },
    TimeToEvent { censor_time: f64 },
}

/// Parameter overrides layered onto a preset's values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaConfig {
    /// Population parameters on the natural scale.
    pub psi_pop: Option<Vec<f64>>,
    /// Random-effect standard deviations (diagonal covariance).
    pub omega_sd: Option<Vec<f64>>,
    pub error: Option<ErrorModel>,
}

impl ThetaConfig {
    /// Apply the overrides to a base parameter set.
    pub fn apply(&self, base: &Theta) -> Result<Theta> {
        let pop = &base.population;
        let p = pop.dim();
        let psi = match &self.psi_pop {
            Some(v) => {
                if v.len() != p {
                    return Err(Error::Config(format!(
                        "theta.psi_pop must have {p} entries, got {}",
                        v.len()
                    )));
                }
                v.clone()
            }
            None => pop.psi_pop().iter().copied().collect(),
        };
        let omega = match &self.omega_sd {
            Some(sds) => {
                if sds.len() != p {
                    return Err(Error::Config(format!(
                        "theta.omega_sd must have {p} entries, got {}",
                        sds.len()
                    )));
                }
                if sds.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::Config(
                        "theta.omega_sd entries must be positive".into(),
                    ));
                }
                DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                    p,
                    sds.iter().map(|&s| s * s),
                ))
            }
            None => pop.omega().clone(),
        };
        let population = pop.reparameterized(psi, omega)?;
        let error = match self.error {
            // Revalidate: deserialized values bypass the constructors.
            Some(ErrorModel::Constant { sigma2 }) => Some(ErrorModel::constant(sigma2)?),
            Some(ErrorModel::Proportional { b }) => Some(ErrorModel::proportional(b)?),
            Some(ErrorModel::Combined { a, b }) => Some(ErrorModel::combined(a, b)?),
            None => base.error,
        };
        Ok(Theta::new(population, error))
    }
}

/// Sampling (`sample`/`benchmark`) options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Kernel tags to run, each producing its own trace.
    pub kernels: Vec<String>,
    pub n_iter: usize,
    /// Restrict to one individual id (default: all).
    pub individual: Option<String>,
    pub mala_stepsize: f64,
    /// Use a Student proposal with this many degrees of freedom for the
    /// MAP-based independence kernel.
    pub student_dof: Option<f64>,
    /// Largest autocorrelation lag in the diagnostics output.
    pub max_lag: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            kernels: vec!["rwm_cycle".into(), "nlme_imh".into()],
            n_iter: 1000,
            individual: None,
            mala_stepsize: 0.01,
            student_dof: None,
            max_lag: 50,
        }
    }
}

/// Estimation (`fit`/`mcstudy`) options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaemSection {
    /// `saem` (reference kernel) or `fsaem` (accelerated switch).
    pub algorithm: String,
    pub n_iter: usize,
    /// Iterations run with stepsize 1 before the polynomial decay.
    pub burn: usize,
    pub decay: f64,
    /// Accelerated variant: iteration after which the kernel switches.
    pub switch_after: usize,
    /// Initial values; empty means one fit from the preset parameters.
    pub inits: Vec<ThetaConfig>,
}

impl Default for SaemSection {
    fn default() -> Self {
        SaemSection {
            algorithm: "saem".into(),
            n_iter: 200,
            burn: 100,
            decay: 0.7,
            switch_after: 20,
            inits: Vec::new(),
        }
    }
}

/// Monte Carlo study (`mcstudy`) options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McStudySection {
    pub replicates: usize,
    pub n_iter: usize,
}

impl Default for McStudySection {
    fn default() -> Self {
        McStudySection {
            replicates: 10,
            n_iter: 200,
        }
    }
}

/// Top-level run configuration; every field has a usable default so a
/// minimal file can be `{}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Option<String>,
    /// Input dataset path for `sample`, `fit`, and `benchmark`.
    pub data: Option<PathBuf>,
    pub n_individuals: Option<usize>,
    pub theta: Option<ThetaConfig>,
    pub design: Option<DesignConfig>,
    pub sampler: SamplerSection,
    pub saem: SaemSection,
    pub mcstudy: McStudySection,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// Resolve the preset plus overrides into a concrete model bundle.
    pub fn resolve_model(&self) -> Result<ModelBundle> {
        let name = self.preset.as_deref().unwrap_or(PK_PRESET);
        let mut bundle = preset(name)?;
        if let Some(tc) = &self.theta {
            bundle.theta = tc.apply(&bundle.theta)?;
        }
        if let Some(design) = &self.design {
            let compatible = matches!(
                (design, &bundle.obs),
                (DesignConfig::Continuous { .. }, ObservationModel::Continuous { .. })
                    | (DesignConfig::TimeToEvent { .. }, ObservationModel::TimeToEvent { .. })
            );
            if !compatible {
                return Err(Error::Config(
                    "design kind does not match the preset's observation type".into(),
                ));
            }
            bundle.design = design.clone();
        }
        if let Some(n) = self.n_individuals {
            if n == 0 {
                return Err(Error::Config("n_individuals must be positive".into()));
            }
            bundle.n_individuals = n;
        }
        Ok(bundle)
    }
}

/// Parse a kernel tag, drawing auxiliary parameters from the sampler section.
pub fn parse_kernel(tag: &str, section: &SamplerSection) -> Result<Kernel> {
    match tag {
        "prior_imh" => Ok(Kernel::PriorImh),
        "rwm_componentwise" => Ok(Kernel::RwmComponentwise),
        "rwm_blockwise" => Ok(Kernel::RwmBlockwise),
        "rwm_cycle" => Ok(Kernel::RwmCycle),
        "mala" => Ok(Kernel::Mala {
            stepsize: section.mala_stepsize,
        }),
        "nlme_imh" => Ok(Kernel::NlmeImh {
            family: match section.student_dof {
                Some(dof) => ProposalFamily::Student { dof },
                None => ProposalFamily::Gaussian,
            },
        }),
        other => Err(Error::Config(format!(
            "unknown kernel tag {other:?} (available: prior_imh, rwm_componentwise, \
             rwm_blockwise, rwm_cycle, mala, nlme_imh)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

pub const PK_PRESET: &str = "warfarin-like-pk";
pub const TTE_PRESET: &str = "weibull-tte";

/// A fully specified model: parameters, observation model, simulation design
/// and default population size.
#[derive(Clone)]
pub struct ModelBundle {
    pub name: &'static str,
    pub theta: Theta,
    pub obs: ObservationModel,
    pub design: DesignConfig,
    pub n_individuals: usize,
}

impl std::fmt::Debug for ModelBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelBundle")
            .field("name", &self.name)
            .field("design", &self.design)
            .field("n_individuals", &self.n_individuals)
            .finish_non_exhaustive()
    }
}

/// Built-in presets: a one-compartment oral-absorption PK model with
/// log-normal random effects, and a repeated-event Weibull model.
pub fn preset(name: &str) -> Result<ModelBundle> {
    match name {
        PK_PRESET => {
            let population = PopulationModel::gaussian(
                vec![1.0, 8.0, 0.1],
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                    0.5 * 0.5,
                    0.2 * 0.2,
                    0.3 * 0.3,
                ])),
                vec![Transform::Log, Transform::Log, Transform::Log],
            )?
            .with_names(vec!["ka".into(), "v".into(), "k".into()])?
            .with_diagonal_omega();
            let theta = Theta::new(population, Some(ErrorModel::constant(0.5)?));
            Ok(ModelBundle {
                name: PK_PRESET,
                theta,
                obs: ObservationModel::Continuous {
                    structural: Arc::new(Pk1Oral),
                    error: ErrorModel::constant(0.5)?,
                },
                design: DesignConfig::Continuous {
                    times: default_pk_times(),
                    dose: 100.0,
                },
                n_individuals: 32,
            })
        }
        TTE_PRESET => {
            let population = PopulationModel::gaussian(
                vec![10.0, 3.0],
                DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
                    0.3 * 0.3,
                    0.3 * 0.3,
                ])),
                vec![Transform::Log, Transform::Log],
            )?
            .with_names(vec!["lambda".into(), "beta".into()])?
            .with_diagonal_omega();
            let theta = Theta::new(population, None);
            Ok(ModelBundle {
                name: TTE_PRESET,
                theta,
                obs: ObservationModel::TimeToEvent {
                    hazard: Arc::new(WeibullHazard),
                },
                design: DesignConfig::TimeToEvent { censor_time: 20.0 },
                n_individuals: 100,
            })
        }
        other => Err(Error::Config(format!(
            "unknown preset {other:?} (available: {PK_PRESET}, {TTE_PRESET})"
        ))),
    }
}
