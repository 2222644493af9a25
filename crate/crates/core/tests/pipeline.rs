//! End-to-end use of the library the way a consumer would drive it:
//! simulate a population, estimate the parameters, then sample the
//! random effects of one individual under the fitted model.

use nalgebra::{DMatrix, DVector};
use popmix_core::diagnostics::{ess, msjd};
use popmix_core::likelihood::{ErrorModel, ObservationModel, Posterior};
use popmix_core::map_laplace::ProposalFamily;
use popmix_core::model::{PopulationModel, Theta};
use popmix_core::models::{default_pk_times, simulate_continuous, ContinuousDesign, Pk1Oral};
use popmix_core::saem::{fsaem_fit, SaemConfig};
use popmix_core::samplers::{run_sampler, ChainInit, Kernel, SamplerConfig};
use popmix_core::transform::Transform;
use std::sync::Arc;

fn truth() -> Theta {
    let population = PopulationModel::gaussian(
        vec![1.0, 8.0, 0.1],
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.04, 0.09])),
        vec![Transform::Log, Transform::Log, Transform::Log],
    )
    .unwrap()
    .with_names(vec!["ka".into(), "v".into(), "k".into()])
    .unwrap()
    .with_diagonal_omega();
    Theta::new(population, Some(ErrorModel::constant(0.5).unwrap()))
}

#[test]
fn simulate_fit_sample_round_trip() {
    let obs = ObservationModel::Continuous {
        structural: Arc::new(Pk1Oral),
        error: ErrorModel::constant(0.5).unwrap(),
    };
    let design = ContinuousDesign::replicate(32, default_pk_times(), 100.0);
    let data = simulate_continuous(&truth(), &Pk1Oral, &design, 2024).unwrap();
    assert_eq!(data.len(), 32);

    // Estimate from a deliberately wrong start.
    let start = {
        let population = PopulationModel::gaussian(
            vec![2.5, 15.0, 0.3],
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 1.0])),
            vec![Transform::Log, Transform::Log, Transform::Log],
        )
        .unwrap()
        .with_names(vec!["ka".into(), "v".into(), "k".into()])
        .unwrap()
        .with_diagonal_omega();
        Theta::new(population, Some(ErrorModel::constant(2.0).unwrap()))
    };
    let config = SaemConfig::reference(400, 7);
    let fit = fsaem_fit(&data, &obs, &start, &config).unwrap();
    let estimates = fit.final_theta.flatten();
    let names = fit.final_theta.component_names();
    let get = |name: &str| estimates[names.iter().position(|n| n == name).unwrap()];
    // Finite-sample estimates from 32 individuals; wide but honest bounds.
    assert!((get("ka_pop") - 1.0).abs() / 1.0 < 0.3, "ka_pop {}", get("ka_pop"));
    assert!((get("v_pop") - 8.0).abs() / 8.0 < 0.15, "v_pop {}", get("v_pop"));
    assert!((get("k_pop") - 0.1).abs() / 0.1 < 0.15, "k_pop {}", get("k_pop"));
    assert!(get("sigma2") > 0.25 && get("sigma2") < 1.0, "sigma2 {}", get("sigma2"));

    // Sample one individual's effects under the fitted model and check the
    // independence kernel dominates the adaptive random walk.
    let post = Posterior::new(&data[0], &obs, &fit.final_theta.population).unwrap();
    let n_iter = 4000;
    let cfg = |kernel, seed| SamplerConfig::new(kernel, n_iter, seed).with_init(ChainInit::Map);
    let rwm = run_sampler(&post, &cfg(Kernel::RwmCycle, 11)).unwrap();
    let imh = run_sampler(
        &post,
        &cfg(Kernel::NlmeImh { family: ProposalFamily::Gaussian }, 12),
    )
    .unwrap();
    assert!(!imh.fallback);
    let acc = imh.move_accepts as f64 / imh.move_proposals as f64;
    assert!(acc > 0.5, "independence acceptance {acc}");

    let (ess_rwm, _) = ess(&rwm).unwrap();
    let (ess_imh, _) = ess(&imh).unwrap();
    let (msjd_rwm, msjd_imh) = (msjd(&rwm).unwrap(), msjd(&imh).unwrap());
    for j in 0..3 {
        assert!(
            ess_imh[j] > ess_rwm[j],
            "coordinate {j}: ESS {} vs {}",
            ess_imh[j],
            ess_rwm[j]
        );
        assert!(msjd_imh[j] > msjd_rwm[j]);
    }

    // Chain means agree between kernels: same stationary law.
    for j in 0..3 {
        let mean = |t: &popmix_core::samplers::ChainTrace| {
            t.samples.iter().map(|s| s[j]).sum::<f64>() / t.len() as f64
        };
        assert!((mean(&rwm) - mean(&imh)).abs() < 0.1);
    }
}
