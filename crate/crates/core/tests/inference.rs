//! Reduction oracles and algebraic identities for the inference layer.

use fedcox_core::federation::{gel_iterate, FederatedCohort, GelInit, LambdaSchedule};
use fedcox_core::inference::{
    debiased_from_parts, debiased_linear_functional, decorrelated_score,
    decorrelated_score_inference, estimate_omega_k, estimate_w_k, insert_coordinate,
    linear_functional_inference, nuisance_blocks, sigma_nu_hat, variance_linear,
    LinearFunctionalTarget,
};
use fedcox_core::lasso::{fit_l1_quadratic, SolverOptions};
use fedcox_core::stats::soft_threshold;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

mod common;
use common::random_dataset;

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn random_psd(rng: &mut rand_chacha::ChaCha12Rng, p: usize, ridge: f64) -> Array2<f64> {
    let a = Array2::from_shape_fn((p, p), |_| rng.sample::<f64, _>(StandardNormal));
    let mut h = a.t().dot(&a) / p as f64;
    for j in 0..p {
        h[(j, j)] += ridge;
    }
    h
}

#[test]
fn k1_debiased_functional_reduces_to_single_sample_form() {
    // With one center the correction telescopes to -omega' grad(beta_hat).
    let mut rng = fedcox_core::stats::rng_for(60, 1);
    let d = random_dataset(&mut rng, 40, 4, 0.25);
    let c1 = FederatedCohort::partition(&d, 1, 0).unwrap();
    let lam = 0.08;
    let trace = gel_iterate(
        &c1,
        2,
        &LambdaSchedule::Constant(lam),
        &GelInit::LocalLasso { lambda0: lam },
        &opts(),
    )
    .unwrap();
    let (beta_tilde, beta_hat) = trace.inference_pair().unwrap();
    let loading = Array1::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
    let omega =
        estimate_omega_k(c1.center_data(0), beta_hat.view(), loading.view(), 0.1, &opts())
            .unwrap()
            .beta;
    let est = debiased_linear_functional(
        &c1,
        beta_tilde,
        beta_hat,
        std::slice::from_ref(&omega),
        &loading,
    )
    .unwrap();
    let grad_hat = c1.center_data(0).gradient(beta_hat.view()).unwrap();
    let want = loading.dot(beta_hat) - omega.dot(&grad_hat);
    assert!((est - want).abs() < 1e-10, "{est} vs {want}");
}

#[test]
fn zero_omegas_return_plain_plugin_value() {
    let mut rng = fedcox_core::stats::rng_for(61, 1);
    let d = random_dataset(&mut rng, 24, 3, 0.25);
    let c = FederatedCohort::partition(&d, 2, 1).unwrap();
    let beta_tilde = Array1::from_vec(vec![0.1, -0.2, 0.3]);
    let beta_hat = Array1::from_vec(vec![0.15, -0.25, 0.28]);
    let loading = Array1::from_vec(vec![0.0, 1.0, 0.0]);
    let omegas = vec![Array1::zeros(3); 2];
    let est =
        debiased_linear_functional(&c, &beta_tilde, &beta_hat, &omegas, &loading).unwrap();
    assert_eq!(est, loading.dot(&beta_hat));
}

#[test]
fn injected_identity_hessian_gives_soft_threshold_omega() {
    let mut rng = fedcox_core::stats::rng_for(62, 1);
    let h: Array2<f64> = Array2::eye(6);
    let c = Array1::from_shape_fn(6, |_| rng.sample::<f64, _>(StandardNormal));
    let lam = 0.4;
    let fit = fit_l1_quadratic(&h, c.view(), lam, &opts()).unwrap();
    for j in 0..6 {
        assert!((fit.beta[j] - soft_threshold(c[j], lam / 2.0)).abs() < 1e-12);
    }
}

#[test]
fn loading_linearity_under_superposing_programs() {
    // Injected identity Hessians with disjoint-support loadings: the
    // quadratic programs superpose (omega(c1+c2) = omega(c1) + omega(c2)),
    // so the debiased estimate is additive in the loading.
    let mut rng = fedcox_core::stats::rng_for(63, 1);
    let p = 6;
    let k = 3;
    let h: Array2<f64> = Array2::eye(p);
    let lam = 0.3;
    let beta_hat = Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal));
    let mut c1 = Array1::zeros(p);
    let mut c2 = Array1::zeros(p);
    c1[0] = 1.4;
    c1[2] = -0.9;
    c2[3] = 2.0;
    c2[5] = 0.7;
    let c12 = &c1 + &c2;
    let solve = |c: &Array1<f64>| fit_l1_quadratic(&h, c.view(), lam, &opts()).unwrap().beta;
    let (o1, o2, o12) = (solve(&c1), solve(&c2), solve(&c12));
    for j in 0..p {
        assert!((o12[j] - (o1[j] + o2[j])).abs() < 1e-12, "programs must superpose");
    }
    let gt: Vec<Array1<f64>> =
        (0..k).map(|_| Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal))).collect();
    let gh: Vec<Array1<f64>> =
        (0..k).map(|_| Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal))).collect();
    let avg = Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal));
    let reps = |omega: &Array1<f64>| vec![omega.clone(); k];
    let e1 = debiased_from_parts(beta_hat.view(), c1.view(), &reps(&o1), &gt, &gh, &avg);
    let e2 = debiased_from_parts(beta_hat.view(), c2.view(), &reps(&o2), &gt, &gh, &avg);
    let e12 = debiased_from_parts(beta_hat.view(), c12.view(), &reps(&o12), &gt, &gh, &avg);
    assert!((e12 - (e1 + e2)).abs() < 1e-10, "{e12} vs {}", e1 + e2);
}

#[test]
fn scale_equivariance_of_estimate_and_variance() {
    let mut rng = fedcox_core::stats::rng_for(64, 1);
    let d = random_dataset(&mut rng, 30, 3, 0.25);
    let c = FederatedCohort::partition(&d, 2, 3).unwrap();
    let beta_hat = Array1::from_vec(vec![0.2, -0.1, 0.05]);
    let beta_tilde = Array1::from_vec(vec![0.18, -0.12, 0.06]);
    let loading = Array1::from_vec(vec![1.0, 0.5, 0.0]);
    let s = 3.0;
    let omegas: Vec<Array1<f64>> = (0..2)
        .map(|_| Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let scaled: Vec<Array1<f64>> = omegas.iter().map(|o| o * s).collect();
    let scaled_loading = &loading * s;

    let est = debiased_linear_functional(&c, &beta_tilde, &beta_hat, &omegas, &loading).unwrap();
    let est_s =
        debiased_linear_functional(&c, &beta_tilde, &beta_hat, &scaled, &scaled_loading).unwrap();
    assert!((est_s - s * est).abs() < 1e-10);

    let var = variance_linear(&c, &omegas, &beta_hat, &loading).unwrap_or(f64::NAN);
    let var_s = variance_linear(&c, &scaled, &beta_hat, &scaled_loading).unwrap_or(f64::NAN);
    if var.is_finite() && var_s.is_finite() {
        assert!((var_s - s * s * var).abs() < 1e-9 * var.abs().max(1.0));
    }
}

#[test]
fn exact_solve_variance_collapses_to_c_dot_omega() {
    // If H_k omega_k = c exactly then 2 c'omega - omega'H omega = c'omega.
    let mut rng = fedcox_core::stats::rng_for(65, 1);
    let p = 4;
    let h = random_psd(&mut rng, p, 0.5);
    let omega = Array1::from_shape_fn(p, |_| rng.sample::<f64, _>(StandardNormal));
    let c = h.dot(&omega);
    let v = 2.0 * c.dot(&omega) - omega.dot(&h.dot(&omega));
    assert!((v - c.dot(&omega)).abs() < 1e-12);
}

#[test]
fn sigma_nu_two_forms_agree() {
    let mut rng = fedcox_core::stats::rng_for(66, 1);
    let d = random_dataset(&mut rng, 40, 4, 0.25);
    let cohort = FederatedCohort::partition(&d, 2, 5).unwrap();
    let beta_hat = Array1::from_vec(vec![0.1, 0.2, -0.3, 0.05]);
    let nu = 1usize;
    let ws: Vec<Array1<f64>> = (0..2)
        .map(|_| Array1::from_shape_fn(3, |_| 0.5 * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let via_director = sigma_nu_hat(&cohort, &beta_hat, nu, &ws).unwrap();

    // block form: (1/K) sum { H_nn - 2 H_gn'w + w'H_gg w }
    let mut acc = 0.0;
    for k in 0..2 {
        let h = cohort.center_data(k).hessian(beta_hat.view()).unwrap();
        let (h_gg, h_gn) = nuisance_blocks(&h, nu);
        acc += h[(nu, nu)] - 2.0 * h_gn.dot(&ws[k]) + ws[k].dot(&h_gg.dot(&ws[k]));
    }
    let via_blocks = acc / 2.0;
    assert!(
        (via_director - via_blocks).abs() <= 1e-10 * via_blocks.abs().max(1.0),
        "{via_director} vs {via_blocks}"
    );
}

#[test]
fn block_diagonal_hessian_gives_zero_w() {
    // no cross term => the decorrelation direction is zero
    let mut h = Array2::eye(5) * 2.0;
    h[(2, 3)] = 0.4;
    h[(3, 2)] = 0.4; // correlation away from coordinate 0
    let (h_gg, h_gn) = nuisance_blocks(&h, 0);
    assert!(h_gn.iter().all(|v| *v == 0.0));
    let fit = fit_l1_quadratic(&h_gg, h_gn.view(), 0.05, &opts()).unwrap();
    assert!(fit.beta.iter().all(|v| *v == 0.0));
}

#[test]
fn k1_score_with_zero_w_is_plain_partial_score() {
    let mut rng = fedcox_core::stats::rng_for(67, 1);
    let d = random_dataset(&mut rng, 30, 3, 0.25);
    let cohort = FederatedCohort::partition(&d, 1, 0).unwrap();
    let nu = 0usize;
    let gamma_hat = Array1::from_vec(vec![0.2, -0.4]);
    let beta_tilde = Array1::from_vec(vec![0.05, 0.18, -0.35]);
    let ws = vec![Array1::zeros(2)];
    let pi = decorrelated_score(&cohort, nu, &gamma_hat, &beta_tilde, &ws).unwrap();
    // K = 1: the GEL shift vanishes, leaving the plain nu-partial score
    let beta0 = insert_coordinate(&gamma_hat, nu, 0.0);
    let g = cohort.center_data(0).gradient(beta0.view()).unwrap();
    assert!((pi - g[nu]).abs() < 1e-12, "{pi} vs {}", g[nu]);
}

#[test]
fn omega_and_w_programs_emit_valid_certificates() {
    let mut rng = fedcox_core::stats::rng_for(68, 1);
    for _ in 0..10 {
        let d = random_dataset(&mut rng, 50, 5, 0.3);
        let beta = Array1::from_shape_fn(5, |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let loading = Array1::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        let omega = estimate_omega_k(&d, beta.view(), loading.view(), 0.08, &opts()).unwrap();
        assert!(omega.diagnostics.kkt_residual <= 1e-7);
        let w = estimate_w_k(&d, beta.view(), 2, 0.08, &opts()).unwrap();
        assert!(w.diagnostics.kkt_residual <= 1e-7);
        assert_eq!(w.beta.len(), 4);
    }
}

#[test]
fn end_to_end_drivers_produce_consistent_reports() {
    let mut rng = fedcox_core::stats::rng_for(69, 1);
    let d = random_dataset(&mut rng, 60, 4, 0.3);
    let cohort = FederatedCohort::partition(&d, 2, 9).unwrap();
    let lam = 0.12;
    let trace = gel_iterate(
        &cohort,
        3,
        &LambdaSchedule::Constant(lam),
        &GelInit::LocalLasso { lambda0: lam },
        &opts(),
    )
    .unwrap();
    let (bt, bh) = trace.inference_pair().unwrap();
    let target = LinearFunctionalTarget::coordinate(0, 4, 0.05).unwrap();
    let rep = linear_functional_inference(&cohort, bt, bh, &target, 0.15).unwrap();
    assert!(rep.ci_low <= rep.estimate && rep.estimate <= rep.ci_high);
    assert!(rep.p_value >= 0.0 && rep.p_value <= 1.0);
    assert_eq!(rep.k, 2);
    assert_eq!(rep.n, 60);
    assert!(rep.variance >= 0.0);
    assert!(rep.comm_floats > 0);

    // driver matches the piece-function assembly
    let omegas: Vec<Array1<f64>> = (0..2)
        .map(|k| {
            estimate_omega_k(cohort.center_data(k), bh.view(), target.loading.view(), 0.15, &opts())
                .unwrap()
                .beta
        })
        .collect();
    let est = debiased_linear_functional(&cohort, bt, bh, &omegas, &target.loading).unwrap();
    assert!((est - rep.estimate).abs() < 1e-10);
    let var = variance_linear(&cohort, &omegas, bh, &target.loading).unwrap();
    assert!((var - rep.variance).abs() < 1e-9 * var.max(1.0));

    let srep = decorrelated_score_inference(&cohort, bt, bh, 0, 0.05, 0.15).unwrap();
    assert!(srep.p_value >= 0.0 && srep.p_value <= 1.0);
    assert!(srep.ci_low <= srep.estimate && srep.estimate <= srep.ci_high);

    // score driver matches the piece functions
    let ws: Vec<Array1<f64>> = (0..2)
        .map(|k| estimate_w_k(cohort.center_data(k), bh.view(), 0, 0.15, &opts()).unwrap().beta)
        .collect();
    let gamma_hat = fedcox_core::inference::drop_coordinate(bh, 0);
    let pi = decorrelated_score(&cohort, 0, &gamma_hat, bt, &ws).unwrap();
    assert!((pi - srep.estimate).abs() < 1e-10);
    let s2 = sigma_nu_hat(&cohort, bh, 0, &ws).unwrap();
    assert!((s2 - srep.variance).abs() < 1e-9 * s2.max(1.0));
}

#[test]
fn report_serializes_to_json_and_csv() {
    let rep = fedcox_core::inference::InferenceReport {
        target: "e1".into(),
        estimate: 0.1,
        variance: 2.0,
        ci_low: -0.1,
        ci_high: 0.3,
        statistic: 1.2,
        p_value: 0.23,
        reject: false,
        alpha: 0.05,
        n: 100,
        p_dim: 10,
        k: 4,
        comm_floats: 1234,
    };
    let json = serde_json::to_string(&rep).unwrap();
    assert!(json.contains("\"estimate\""));
    let row = rep.to_csv_row();
    assert_eq!(row.split(',').count(), fedcox_core::inference::InferenceReport::csv_header().split(',').count());
}
