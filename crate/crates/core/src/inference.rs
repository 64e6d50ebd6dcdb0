//! Debiased estimation of linear functionals with confidence intervals,
//! and the distributed decorrelated score test.
//!
//! Both procedures consume the last two iterates of a [`GelTrace`]: the
//! debias correction telescopes the KKT residual of the final solve, and
//! the score statistic evaluates GEL-shifted local scores at the null
//! point. Per-center programs are L1-penalized quadratic problems on local
//! Hessians; only `O(p)` vectors and scalars ever cross the protocol.

use crate::error::{Error, Result};
use crate::federation::{wire, FederatedCohort};
use crate::lasso::{fit_l1_quadratic, LassoFit, SolverOptions};
use crate::stats::{normal_cdf, normal_quantile};
use crate::survival::SurvivalDataset;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

/// A loading vector and significance level.
#[derive(Debug, Clone)]
pub struct LinearFunctionalTarget {
    pub loading: Array1<f64>,
    pub alpha: f64,
}

impl LinearFunctionalTarget {
    pub fn new(loading: Array1<f64>, alpha: f64) -> Result<Self> {
        if loading.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("loading vector must be nonzero"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0,1)"));
        }
        Ok(Self { loading, alpha })
    }

    /// Canonical basis loading for coordinate `j`.
    pub fn coordinate(j: usize, p: usize, alpha: f64) -> Result<Self> {
        if j >= p {
            return Err(Error::invalid(format!("coordinate {j} out of range for p = {p}")));
        }
        let mut c = Array1::zeros(p);
        c[j] = 1.0;
        Self::new(c, alpha)
    }
}

/// Point estimate, variance, interval, and test decision in one record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceReport {
    pub target: String,
    pub estimate: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub n: usize,
    pub p_dim: usize,
    pub k: usize,
    pub comm_floats: usize,
}

impl InferenceReport {
    pub fn csv_header() -> &'static str {
        "target,estimate,var,ci_low,ci_high,z,p,reject,n,p_dim,k,comm_floats"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{},{},{}",
            self.target,
            self.estimate,
            self.variance,
            self.ci_low,
            self.ci_high,
            self.statistic,
            self.p_value,
            self.reject,
            self.n,
            self.p_dim,
            self.k,
            self.comm_floats
        )
    }
}

// ---------------------------------------------------------------------------
// Per-center programs
// ---------------------------------------------------------------------------

/// Center-side debias direction: minimize
/// `w' H_k(beta_hat) w - 2 c' w + lambda ||w||_1` on the local Hessian.
pub fn estimate_omega_k(
    center: &SurvivalDataset,
    beta_hat: ArrayView1<'_, f64>,
    loading: ArrayView1<'_, f64>,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    if center.n_events() == 0 {
        return Err(Error::DegenerateData("center has no events".into()));
    }
    let hess = center.hessian(beta_hat)?;
    fit_l1_quadratic(&hess, loading, lambda, opts)
}

/// Center-side decorrelation direction for test coordinate `nu`: minimize
/// `w' H_gg w - 2 w' H_gn + lambda ||w||_1` on the nuisance blocks of the
/// local Hessian at `beta_hat`.
pub fn estimate_w_k(
    center: &SurvivalDataset,
    beta_hat: ArrayView1<'_, f64>,
    nu: usize,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<LassoFit> {
    let p = beta_hat.len();
    if p < 2 {
        return Err(Error::invalid("score test needs p >= 2"));
    }
    if nu >= p {
        return Err(Error::invalid("test coordinate out of range"));
    }
    let hess = center.hessian(beta_hat)?;
    let (h_gg, h_gn) = nuisance_blocks(&hess, nu);
    fit_l1_quadratic(&h_gg, h_gn.view(), lambda, opts)
}

/// Split a `p x p` Hessian into the nuisance block `H_gg` and the cross
/// column `H_gn` for test coordinate `nu`.
pub fn nuisance_blocks(hess: &Array2<f64>, nu: usize) -> (Array2<f64>, Array1<f64>) {
    let p = hess.nrows();
    let keep: Vec<usize> = (0..p).filter(|&j| j != nu).collect();
    let mut h_gg = Array2::zeros((p - 1, p - 1));
    let mut h_gn = Array1::zeros(p - 1);
    for (a, &ja) in keep.iter().enumerate() {
        h_gn[a] = hess[(ja, nu)];
        for (b, &jb) in keep.iter().enumerate() {
            h_gg[(a, b)] = hess[(ja, jb)];
        }
    }
    (h_gg, h_gn)
}

// ---------------------------------------------------------------------------
// Debiased linear functional
// ---------------------------------------------------------------------------

/// The bias-corrected functional assembled from already-evaluated parts:
/// `c'beta_hat + (1/K) sum_k omega_k' { g_k(beta_tilde) - g_k(beta_hat)
/// - grad_avg(beta_tilde) }`.
pub fn debiased_from_parts(
    beta_hat: ArrayView1<'_, f64>,
    loading: ArrayView1<'_, f64>,
    omegas: &[Array1<f64>],
    grads_tilde: &[Array1<f64>],
    grads_hat: &[Array1<f64>],
    grad_avg_tilde: &Array1<f64>,
) -> f64 {
    let k = omegas.len();
    let mut corr = 0.0;
    for i in 0..k {
        let resid = &grads_tilde[i] - &grads_hat[i] - grad_avg_tilde;
        corr += omegas[i].dot(&resid);
    }
    loading.dot(&beta_hat) + corr / k as f64
}

/// Debiased estimate of `c'beta*` over the protocol: one batched gradient
/// round at `(beta_tilde, beta_hat)` plus the supplied directions.
pub fn debiased_linear_functional(
    cohort: &FederatedCohort,
    beta_tilde: &Array1<f64>,
    beta_hat: &Array1<f64>,
    omegas: &[Array1<f64>],
    loading: &Array1<f64>,
) -> Result<f64> {
    let p = cohort.p();
    if beta_tilde.len() != p || beta_hat.len() != p || loading.len() != p {
        return Err(Error::invalid("dimension mismatch"));
    }
    if omegas.len() != cohort.k() || omegas.iter().any(|o| o.len() != p) {
        return Err(Error::invalid("need one p-dim omega per center"));
    }
    let rounds = cohort.gradient_round(&[beta_tilde.clone(), beta_hat.clone()])?;
    let grads_tilde: Vec<Array1<f64>> = rounds.iter().map(|g| g[0].clone()).collect();
    let grads_hat: Vec<Array1<f64>> = rounds.iter().map(|g| g[1].clone()).collect();
    let mut grad_avg_tilde = grads_tilde[0].clone();
    for g in grads_tilde.iter().skip(1) {
        grad_avg_tilde += g;
    }
    grad_avg_tilde /= cohort.k() as f64;
    Ok(debiased_from_parts(
        beta_hat.view(),
        loading.view(),
        omegas,
        &grads_tilde,
        &grads_hat,
        &grad_avg_tilde,
    ))
}

/// Distributed estimate of the asymptotic variance `c'omega*`:
/// `(1/K) sum_k { 2 c'omega_k - omega_k' H_k(beta_hat) omega_k }`.
/// Each center contributes two scalars; the Hessian never moves.
pub fn variance_linear(
    cohort: &FederatedCohort,
    omegas: &[Array1<f64>],
    beta_hat: &Array1<f64>,
    loading: &Array1<f64>,
) -> Result<f64> {
    if omegas.len() != cohort.k() {
        return Err(Error::invalid("need one omega per center"));
    }
    let mut acc = 0.0;
    for (k, omega) in omegas.iter().enumerate() {
        let h_omega = cohort.center_data(k).hessian_vector_product(beta_hat.view(), omega.view())?;
        acc += 2.0 * loading.dot(omega) - omega.dot(&h_omega);
    }
    let v = acc / cohort.k() as f64;
    if v < 0.0 {
        return Err(Error::DegenerateVariance { value: v });
    }
    Ok(v)
}

/// Two-sided normal interval `estimate -/+ z_{1-alpha/2} sqrt(variance/n)`.
pub fn confidence_interval(
    estimate: f64,
    variance: f64,
    n: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    if variance < 0.0 {
        return Err(Error::invalid(format!("variance must be nonnegative, got {variance}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0,1)"));
    }
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = z * (variance / n as f64).sqrt();
    Ok((estimate - half, estimate + half))
}

/// Full protocol driver: solve the per-center debias programs, assemble
/// the corrected estimate, its variance, and the interval.
pub fn linear_functional_inference(
    cohort: &FederatedCohort,
    beta_tilde: &Array1<f64>,
    beta_hat: &Array1<f64>,
    target: &LinearFunctionalTarget,
    lambda_omega: f64,
) -> Result<InferenceReport> {
    let p = cohort.p();
    if target.loading.len() != p {
        return Err(Error::invalid("loading has wrong length"));
    }
    let floats_before = cohort.comm_summary().floats_up + cohort.comm_summary().floats_down;

    // Round 1 (batched): local gradients at beta_tilde and beta_hat.
    let rounds = cohort.gradient_round(&[beta_tilde.clone(), beta_hat.clone()])?;
    let mut grad_avg_tilde = rounds[0][0].clone();
    for g in rounds.iter().skip(1) {
        grad_avg_tilde += &g[0];
    }
    grad_avg_tilde /= cohort.k() as f64;

    // Round 2: per-center debias programs; replies carry the correction
    // scalar u_k, c'omega_k, and the local quadratic form.
    let replies = cohort.omega_round(
        wire::OMEGA_MODE_LOADING,
        u32::MAX,
        lambda_omega,
        beta_hat,
        beta_tilde,
        &grad_avg_tilde,
        target.loading.as_slice().unwrap(),
    )?;

    let k = cohort.k() as f64;
    let mut corr = 0.0;
    let mut var_acc = 0.0;
    for (_, scalars) in &replies {
        let (c_dot, quad, u) = (scalars[0], scalars[1], scalars[2]);
        corr += u;
        var_acc += 2.0 * c_dot - quad;
    }
    let estimate = target.loading.dot(beta_hat) + corr / k;
    let variance = var_acc / k;
    if variance < 0.0 {
        return Err(Error::DegenerateVariance { value: variance });
    }

    let n = cohort.n();
    let (ci_low, ci_high) = confidence_interval(estimate, variance, n, target.alpha)?;
    let statistic =
        if variance > 0.0 { (n as f64).sqrt() * estimate / variance.sqrt() } else { 0.0 };
    let p_value = 2.0 * (1.0 - normal_cdf(statistic.abs()));
    let reject = statistic.abs() > normal_quantile(1.0 - target.alpha / 2.0);
    let after = cohort.comm_summary();
    Ok(InferenceReport {
        target: describe_loading(&target.loading),
        estimate,
        variance,
        ci_low,
        ci_high,
        statistic,
        p_value,
        reject,
        alpha: target.alpha,
        n,
        p_dim: p,
        k: cohort.k(),
        comm_floats: after.floats_up + after.floats_down - floats_before,
    })
}

fn describe_loading(c: &Array1<f64>) -> String {
    let support: Vec<usize> = c.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(j, _)| j).collect();
    if support.len() == 1 && c[support[0]] == 1.0 {
        format!("e{}", support[0] + 1)
    } else {
        format!("loading[{} nonzero]", support.len())
    }
}

// ---------------------------------------------------------------------------
// Decorrelated score test
// ---------------------------------------------------------------------------

/// The averaged decorrelated score at the null point `(0, gamma_hat)`,
/// from caller-supplied decorrelation directions. One batched gradient
/// round evaluates the GEL-shifted local scores.
pub fn decorrelated_score(
    cohort: &FederatedCohort,
    nu: usize,
    gamma_hat: &Array1<f64>,
    beta_tilde: &Array1<f64>,
    ws: &[Array1<f64>],
) -> Result<f64> {
    let p = cohort.p();
    if gamma_hat.len() != p - 1 || beta_tilde.len() != p {
        return Err(Error::invalid("dimension mismatch"));
    }
    if ws.len() != cohort.k() || ws.iter().any(|w| w.len() != p - 1) {
        return Err(Error::invalid("need one (p-1)-dim w per center"));
    }
    let beta0 = insert_coordinate(gamma_hat, nu, 0.0);
    let rounds = cohort.gradient_round(&[beta0, beta_tilde.clone()])?;
    let mut grad_avg_tilde = rounds[0][1].clone();
    for g in rounds.iter().skip(1) {
        grad_avg_tilde += &g[1];
    }
    grad_avg_tilde /= cohort.k() as f64;

    let keep: Vec<usize> = (0..p).filter(|&j| j != nu).collect();
    let mut acc = 0.0;
    for (k, grads) in rounds.iter().enumerate() {
        // GEL-shifted local score at the null point
        let g0 = &grads[0] - &(&grads[1] - &grad_avg_tilde);
        let mut pi = g0[nu];
        for (a, &ja) in keep.iter().enumerate() {
            pi -= ws[k][a] * g0[ja];
        }
        acc += pi;
    }
    Ok(acc / cohort.k() as f64)
}

/// Distributed variance of the decorrelated score:
/// `(1/K) sum_k { H_nn - 2 H_gn'w_k + w_k'H_gg w_k }` at `beta_hat`.
pub fn sigma_nu_hat(
    cohort: &FederatedCohort,
    beta_hat: &Array1<f64>,
    nu: usize,
    ws: &[Array1<f64>],
) -> Result<f64> {
    let p = cohort.p();
    if ws.len() != cohort.k() {
        return Err(Error::invalid("need one w per center"));
    }
    let mut acc = 0.0;
    for (k, w) in ws.iter().enumerate() {
        // sigma_k = (e_nu - embed(w))' H_k (e_nu - embed(w)) expanded in
        // blocks; evaluated with two Hessian-vector products.
        let mut dir = insert_coordinate(w, nu, 0.0);
        dir *= -1.0;
        dir[nu] = 1.0;
        let hd = cohort.center_data(k).hessian_vector_product(beta_hat.view(), dir.view())?;
        acc += dir.dot(&hd);
        let _ = p;
    }
    let v = acc / cohort.k() as f64;
    if v <= 0.0 {
        return Err(Error::DegenerateVariance { value: v });
    }
    Ok(v)
}

/// Level-alpha two-sided normal test of the scaled score. The decision is
/// `|z| > z_{1-alpha/2}` (strict), so sitting exactly on the quantile does
/// not reject.
pub fn score_test(pi_bar: f64, sigma_nu: f64, n: usize, alpha: f64) -> Result<(f64, f64, bool)> {
    if !(sigma_nu > 0.0) {
        return Err(Error::invalid(format!("sigma_nu must be positive, got {sigma_nu}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0,1)"));
    }
    let z = (n as f64).sqrt() * pi_bar / sigma_nu;
    let p_value = 2.0 * (1.0 - normal_cdf(z.abs()));
    let reject = z.abs() > normal_quantile(1.0 - alpha / 2.0);
    Ok((z, p_value, reject))
}

/// Full protocol driver for the decorrelated score test of
/// `H_0: beta*_nu = 0`.
pub fn decorrelated_score_inference(
    cohort: &FederatedCohort,
    beta_tilde: &Array1<f64>,
    beta_hat: &Array1<f64>,
    nu: usize,
    alpha: f64,
    lambda_w: f64,
) -> Result<InferenceReport> {
    let p = cohort.p();
    if p < 2 {
        return Err(Error::invalid("score test needs p >= 2"));
    }
    if nu >= p {
        return Err(Error::invalid("test coordinate out of range"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha must lie in (0,1)"));
    }
    let floats_before = cohort.comm_summary().floats_up + cohort.comm_summary().floats_down;

    // Round 1: distributed gradient at beta_tilde (the GEL anchor).
    let rounds = cohort.gradient_round(std::slice::from_ref(beta_tilde))?;
    let mut grad_avg_tilde = rounds[0][0].clone();
    for g in rounds.iter().skip(1) {
        grad_avg_tilde += &g[0];
    }
    grad_avg_tilde /= cohort.k() as f64;

    // Round 2: per-center decorrelation programs; replies carry the local
    // score contribution and the three variance scalars.
    let replies = cohort.omega_round(
        wire::OMEGA_MODE_SCORE,
        nu as u32,
        lambda_w,
        beta_hat,
        beta_tilde,
        &grad_avg_tilde,
        &[],
    )?;
    let k = cohort.k() as f64;
    let mut pi_bar = 0.0;
    let mut var_acc = 0.0;
    for (_, scalars) in &replies {
        let (pi, hnn, hgn_w, w_hgg_w) = (scalars[0], scalars[1], scalars[2], scalars[3]);
        pi_bar += pi;
        var_acc += hnn - 2.0 * hgn_w + w_hgg_w;
    }
    pi_bar /= k;
    let sigma2 = var_acc / k;
    if sigma2 <= 0.0 {
        return Err(Error::DegenerateVariance { value: sigma2 });
    }
    let n = cohort.n();
    let (z, p_value, reject) = score_test(pi_bar, sigma2.sqrt(), n, alpha)?;
    let half = normal_quantile(1.0 - alpha / 2.0) * (sigma2 / n as f64).sqrt();
    let after = cohort.comm_summary();
    Ok(InferenceReport {
        target: format!("coord{}", nu + 1),
        estimate: pi_bar,
        variance: sigma2,
        ci_low: pi_bar - half,
        ci_high: pi_bar + half,
        statistic: z,
        p_value,
        reject,
        alpha,
        n,
        p_dim: p,
        k: cohort.k(),
        comm_floats: after.floats_up + after.floats_down - floats_before,
    })
}

/// Insert `value` at position `nu`, shifting the remainder right.
pub fn insert_coordinate(gamma: &Array1<f64>, nu: usize, value: f64) -> Array1<f64> {
    let p = gamma.len() + 1;
    let mut out = Array1::zeros(p);
    let mut g = 0;
    for j in 0..p {
        if j == nu {
            out[j] = value;
        } else {
            out[j] = gamma[g];
            g += 1;
        }
    }
    out
}

/// Drop coordinate `nu`.
pub fn drop_coordinate(beta: &Array1<f64>, nu: usize) -> Array1<f64> {
    Array1::from_iter(beta.iter().enumerate().filter(|(j, _)| *j != nu).map(|(_, v)| *v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn interval_is_symmetric_and_uses_the_normal_quantile() {
        // quantile contract: accurate to 1e-10
        let (lo, hi) = confidence_interval(2.0, 4.0, 100, 0.05).unwrap();
        let half = 1.959963984540054 * (4.0f64 / 100.0).sqrt();
        assert!((lo - (2.0 - half)).abs() < 1e-10);
        assert!((hi - (2.0 + half)).abs() < 1e-10);
        assert!((lo + hi) / 2.0 - 2.0 < 1e-14);
    }

    #[test]
    fn zero_variance_gives_degenerate_interval() {
        let (lo, hi) = confidence_interval(1.5, 0.0, 50, 0.05).unwrap();
        assert_eq!(lo, 1.5);
        assert_eq!(hi, 1.5);
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(confidence_interval(0.0, -1.0, 10, 0.05).is_err());
    }

    #[test]
    fn score_test_boundary_is_not_rejected() {
        let z = normal_quantile(0.975);
        assert!((z - 1.959963985).abs() < 1e-8);
        // pick pi_bar so that sqrt(n) pi / sigma lands exactly on z
        let n = 400;
        let sigma = 2.0;
        let pi = z * sigma / (n as f64).sqrt();
        let (stat, p, reject) = score_test(pi, sigma, n, 0.05).unwrap();
        assert!((stat - z).abs() < 1e-12);
        assert!((p - 0.05).abs() < 1e-10);
        assert!(!reject, "strict inequality at the boundary");
    }

    #[test]
    fn zero_score_means_p_one() {
        let (z, p, reject) = score_test(0.0, 1.0, 100, 0.05).unwrap();
        assert_eq!(z, 0.0);
        assert!((p - 1.0).abs() < 1e-15);
        assert!(!reject);
    }

    #[test]
    fn coordinate_insert_drop_roundtrip() {
        let gamma = array![1.0, 2.0, 3.0];
        for nu in 0..4 {
            let beta = insert_coordinate(&gamma, nu, 9.0);
            assert_eq!(beta[nu], 9.0);
            assert_eq!(drop_coordinate(&beta, nu), gamma);
        }
    }

    #[test]
    fn nuisance_blocks_pick_the_right_entries() {
        let h = array![[1.0, 2.0, 3.0], [2.0, 4.0, 5.0], [3.0, 5.0, 6.0]];
        let (h_gg, h_gn) = nuisance_blocks(&h, 1);
        assert_eq!(h_gg, array![[1.0, 3.0], [3.0, 6.0]]);
        assert_eq!(h_gn, array![2.0, 5.0]);
    }
}
