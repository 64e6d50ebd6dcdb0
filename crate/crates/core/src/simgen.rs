//! Synthetic-data generation, evaluation metrics, and the Monte-Carlo
//! experiment driver.
//!
//! The generator draws clipped standard-normal covariates and exponential
//! event/censoring times whose rates share the factor `exp(x'beta*)`, so
//! the censored fraction is `scale / (1 + scale)` regardless of the
//! covariates. Replications run in parallel with per-replication RNG
//! streams derived from `(seed, rep)`; aggregation is an ordered reduce,
//! so reports are identical across thread counts.

use crate::error::{Error, Result};
use crate::federation::{
    baseline_estimator, full_sample_lasso, gel_iterate, Baseline, FederatedCohort, GelInit,
    LambdaSchedule, TransportKind,
};
use crate::hazard::StepFunction;
use crate::inference::{
    decorrelated_score_inference, linear_functional_inference, InferenceReport,
    LinearFunctionalTarget,
};
use crate::lasso::{theory_scale_lambda, SolverOptions};
use crate::stats::{self, rng_for};
use crate::survival::{SurvivalDataset, TiesPolicy};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// RNG stream labels, one per purpose.
const STREAM_COVARIATES: u64 = 1;
const STREAM_TIMES: u64 = 2;
const STREAM_PARTITION: u64 = 3;
const STREAM_SPLIT: u64 = 4;

/// Regularization rule used by the harness; every report echoes it so a
/// result is attributable to its tuning.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TuningConfig {
    /// `theory_scale` or `cv`.
    pub rule: String,
    /// Constant for the local (center-level) fits: beta_0, one-center,
    /// average, and the per-center fits inside the debiased average.
    pub c_local: f64,
    /// Constant for the corrected solves in rounds t >= 1.
    pub c_gel: f64,
    /// Constant for the pooled full-sample benchmark.
    pub c_full: f64,
    /// Constant for the debias direction programs.
    pub c_omega: f64,
    /// Constant for the decorrelation direction programs.
    pub c_w: f64,
    /// Constant for the nodewise programs inside the debiased average.
    pub c_nodewise: f64,
    pub cv_folds: usize,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            rule: "theory_scale".into(),
            c_local: 0.5,
            c_gel: 0.5,
            c_full: 0.5,
            c_omega: 0.5,
            c_w: 0.5,
            c_nodewise: 0.5,
            cv_folds: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub k: usize,
    /// Empty means the default pattern `(0, 2, 2, 2, 0, ...)`.
    pub beta_star: Vec<f64>,
    /// Censoring rate scale: the censored fraction is `scale/(1+scale)`.
    pub censor_scale: f64,
    pub clip: f64,
    pub replications: usize,
    pub seed: u64,
    /// Value of the tested coordinate (first coordinate) under the
    /// alternative; 0 under the null.
    pub nu_star: f64,
    pub rounds: usize,
    pub alpha: f64,
    pub tuning: TuningConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            p: 50,
            k: 4,
            beta_star: vec![],
            censor_scale: 3.0 / 7.0,
            clip: 1.0,
            replications: 400,
            seed: 1,
            nu_star: 0.0,
            rounds: 10,
            alpha: 0.05,
            tuning: TuningConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 || self.p == 0 {
            return Err(Error::invalid("n, p, K must be positive"));
        }
        if self.n % self.k != 0 {
            return Err(Error::invalid(format!("K = {} must divide n = {}", self.k, self.n)));
        }
        if !(self.censor_scale > 0.0) {
            return Err(Error::invalid("censor_scale must be positive"));
        }
        if !self.beta_star.is_empty() && self.beta_star.len() != self.p {
            return Err(Error::invalid("beta_star length must equal p"));
        }
        Ok(())
    }

    /// Effective coefficient vector: the configured one, or the default
    /// pattern with the tested coordinate set to `nu_star`.
    pub fn effective_beta_star(&self) -> Array1<f64> {
        let mut beta = if self.beta_star.is_empty() {
            default_beta_star(self.p)
        } else {
            Array1::from_vec(self.beta_star.clone())
        };
        if self.beta_star.is_empty() {
            beta[0] = self.nu_star;
        }
        beta
    }
}

/// `(0, 2, 2, 2, 0, ...)`.
pub fn default_beta_star(p: usize) -> Array1<f64> {
    let mut beta = Array1::zeros(p);
    for j in 1..=3.min(p - 1) {
        beta[j] = 2.0;
    }
    beta
}

/// Draw one dataset: clipped standard-normal covariates, exponential
/// event times with rate `exp(x'beta*)`, exponential censoring with rate
/// `censor_scale * exp(x'beta*)`. Deterministic in `(cfg.seed, rep_seed)`.
pub fn generate_dataset(cfg: &SimConfig, rep_seed: u64) -> Result<SurvivalDataset> {
    cfg.validate()?;
    let beta_star = cfg.effective_beta_star();
    let mut rng_x = rng_for(cfg.seed, (rep_seed << 3) | STREAM_COVARIATES);
    let mut rng_t = rng_for(cfg.seed, (rep_seed << 3) | STREAM_TIMES);
    let n = cfg.n;
    let p = cfg.p;
    let mut x = Array2::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            let z: f64 = rng_x.sample(StandardNormal);
            x[(i, j)] = z.clamp(-cfg.clip, cfg.clip);
        }
    }
    let mut times = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        let rate = x.row(i).dot(&beta_star).exp();
        let u1: f64 = rng_t.random();
        let u2: f64 = rng_t.random();
        let t = -(1.0 - u1).ln() / rate;
        let c = -(1.0 - u2).ln() / (cfg.censor_scale * rate);
        times.push(t.min(c));
        events.push(t <= c);
    }
    // Continuous draws: ties have probability zero, but a jitter policy
    // keeps astronomically unlucky seeds from aborting a 400-rep study.
    SurvivalDataset::with_options(times, events, x, TiesPolicy::Jitter { seed: cfg.seed }, None)
}

// ---------------------------------------------------------------------------
// Censoring survival and the IPW concordance index
// ---------------------------------------------------------------------------

/// Kaplan-Meier estimator of the censoring survival `P(C > t)`: the
/// product-limit estimator with flipped indicators.
pub fn km_censoring_survival(train: &SurvivalDataset) -> Result<StepFunction> {
    if train.n() == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let n = train.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| train.times()[a].partial_cmp(&train.times()[b]).unwrap());
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    for (rank, &i) in order.iter().enumerate() {
        if !train.events()[i] {
            // censoring event for the flipped process
            let at_risk = (n - rank) as f64;
            surv *= 1.0 - 1.0 / at_risk;
            knots.push(train.times()[i]);
            values.push(surv);
        }
    }
    Ok(StepFunction {
        knots,
        values,
        domain_end: train.study_end(),
    })
}

/// Diagnostics from the weighted concordance computation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CIndexOutcome {
    pub c_index: f64,
    pub usable_pairs: usize,
    /// Pairs dropped because the censoring survival vanished at the
    /// event time (beyond the weight-truncation horizon).
    pub truncated_pairs: usize,
}

/// Inverse-probability-of-censoring weighted concordance: pairs
/// `(i, j)` with an observed event at `Z_i < Z_j` weighted by
/// `G(Z_i)^{-2}`, concordant when the risk score orders them correctly;
/// score ties earn half credit. `tau_w` caps the usable event times.
pub fn c_index_ipw(
    train: &SurvivalDataset,
    test: &SurvivalDataset,
    beta: &Array1<f64>,
    tau_w: Option<f64>,
) -> Result<CIndexOutcome> {
    if beta.len() != test.p() {
        return Err(Error::invalid("beta has wrong length"));
    }
    let g = km_censoring_survival(train)?;
    let n = test.n();
    let scores: Vec<f64> = (0..n).map(|i| test.covariate_row(i).dot(beta)).collect();
    let horizon = tau_w.unwrap_or(f64::INFINITY);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut usable = 0usize;
    let mut truncated = 0usize;
    for i in 0..n {
        if !test.events()[i] || test.times()[i] > horizon {
            continue;
        }
        let gi = g.eval(test.times()[i]);
        for j in 0..n {
            if test.times()[i] >= test.times()[j] || i == j {
                continue;
            }
            if gi <= 0.0 {
                truncated += 1;
                continue;
            }
            let w = 1.0 / (gi * gi);
            usable += 1;
            den += w;
            if scores[i] > scores[j] {
                num += w;
            } else if scores[i] == scores[j] {
                num += 0.5 * w;
            }
        }
    }
    if truncated > 0 {
        log::warn!("c-index: {truncated} pairs dropped at zero censoring survival");
    }
    if den == 0.0 {
        return Err(Error::invalid("no usable pairs for the concordance index"));
    }
    Ok(CIndexOutcome { c_index: num / den, usable_pairs: usable, truncated_pairs: truncated })
}

/// Indices of the `top` features ranked by the absolute per-feature score
/// at `beta = 0` (the gradient coordinates decouple there).
pub fn screen_top_features(train: &SurvivalDataset, top: usize) -> Result<Vec<usize>> {
    let g0 = train.gradient(Array1::zeros(train.p()).view())?;
    let mut idx: Vec<usize> = (0..train.p()).collect();
    idx.sort_by(|&a, &b| g0[b].abs().partial_cmp(&g0[a].abs()).unwrap());
    idx.truncate(top);
    idx.sort_unstable();
    Ok(idx)
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Estimation error of the iterate path and the reference estimators.
    Estimation,
    /// Rejection rate under the null (`nu_star = 0`).
    TestSize,
    /// Rejection rate under the configured alternative.
    TestPower,
    /// Coverage and width of the interval for `c = e1`.
    CiCoverage,
}

impl std::str::FromStr for Study {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "estimation" => Ok(Study::Estimation),
            "test_size" => Ok(Study::TestSize),
            "test_power" => Ok(Study::TestPower),
            "ci_coverage" => Ok(Study::CiCoverage),
            other => Err(Error::invalid(format!("unknown study {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationRep {
    pub rep: usize,
    /// `||beta_t - beta*||_2` for `t = 0..rounds`.
    pub iterate_errors: Vec<f64>,
    pub full_error: f64,
    pub one_center_error: f64,
    pub average_error: f64,
    pub average_debiased_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestRep {
    pub rep: usize,
    pub p_value: f64,
    pub reject: bool,
    pub full_p_value: f64,
    pub full_reject: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageRep {
    pub rep: usize,
    pub estimate: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
    pub width: f64,
    /// `sqrt(n) (estimate - truth) / sqrt(variance)`.
    pub standardized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum StudyOutcome {
    Estimation(Vec<EstimationRep>),
    Test(Vec<TestRep>),
    Coverage(Vec<CoverageRep>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub study: Study,
    pub config: SimConfig,
    pub outcome: StudyOutcome,
    /// Replications that errored, with the reason; excluded from the
    /// aggregates but never silently dropped.
    pub failures: Vec<(usize, String)>,
    pub aggregates: BTreeMap<String, f64>,
}

impl ExperimentReport {
    pub fn replication_csv(&self) -> String {
        match &self.outcome {
            StudyOutcome::Estimation(reps) => {
                let rounds = reps.first().map(|r| r.iterate_errors.len()).unwrap_or(0);
                let mut head = String::from("rep");
                for t in 0..rounds {
                    head.push_str(&format!(",err_t{t}"));
                }
                head.push_str(",err_full,err_one_center,err_average,err_average_debiased\n");
                let mut out = head;
                for r in reps {
                    out.push_str(&format!("{}", r.rep));
                    for e in &r.iterate_errors {
                        out.push_str(&format!(",{e:.17e}"));
                    }
                    out.push_str(&format!(
                        ",{:.17e},{:.17e},{:.17e},{:.17e}\n",
                        r.full_error, r.one_center_error, r.average_error, r.average_debiased_error
                    ));
                }
                out
            }
            StudyOutcome::Test(reps) => {
                let mut out = String::from("rep,p_value,reject,full_p_value,full_reject\n");
                for r in reps {
                    out.push_str(&format!(
                        "{},{:.17e},{},{:.17e},{}\n",
                        r.rep, r.p_value, r.reject, r.full_p_value, r.full_reject
                    ));
                }
                out
            }
            StudyOutcome::Coverage(reps) => {
                let mut out = String::from(
                    "rep,estimate,variance,ci_low,ci_high,covered,width,standardized\n",
                );
                for r in reps {
                    out.push_str(&format!(
                        "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e}\n",
                        r.rep, r.estimate, r.variance, r.ci_low, r.ci_high, r.covered, r.width,
                        r.standardized
                    ));
                }
                out
            }
        }
    }
}

/// Per-run regularization levels derived from the tuning rule.
#[derive(Debug, Clone, Copy)]
pub struct Lambdas {
    pub local: f64,
    pub gel: f64,
    pub full: f64,
    pub omega: f64,
    pub w: f64,
    pub nodewise: f64,
}

pub fn lambdas_for(cfg: &SimConfig, cohort: &FederatedCohort, pooled: &SurvivalDataset) -> Result<Lambdas> {
    let t = &cfg.tuning;
    if t.rule != "theory_scale" {
        return Err(Error::invalid("only the theory_scale rule is wired into the studies"));
    }
    let principal = cohort.principal_data();
    Ok(Lambdas {
        local: theory_scale_lambda(principal, t.c_local)?,
        gel: theory_scale_lambda(principal, t.c_gel)?,
        full: theory_scale_lambda(pooled, t.c_full)?,
        omega: theory_scale_lambda(principal, t.c_omega)?,
        w: theory_scale_lambda(principal, t.c_w)?,
        nodewise: theory_scale_lambda(principal, t.c_nodewise)?,
    })
}

fn l2_error(beta: &Array1<f64>, beta_star: &Array1<f64>) -> f64 {
    (beta - beta_star).iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn solver_opts() -> SolverOptions {
    SolverOptions::default()
}

fn run_trace(
    cfg: &SimConfig,
    cohort: &FederatedCohort,
    lambdas: &Lambdas,
) -> Result<crate::federation::GelTrace> {
    let trace = gel_iterate(
        cohort,
        cfg.rounds,
        &LambdaSchedule::Constant(lambdas.gel),
        &GelInit::LocalLasso { lambda0: lambdas.local },
        &solver_opts(),
    )?;
    if let Some((round, msg)) = &trace.failure {
        return Err(Error::invalid(format!("round {round} failed: {msg}")));
    }
    Ok(trace)
}

fn estimation_rep(cfg: &SimConfig, rep: usize) -> Result<EstimationRep> {
    let beta_star = cfg.effective_beta_star();
    let data = generate_dataset(cfg, rep as u64)?;
    let part_seed = stats::rng_for(cfg.seed, ((rep as u64) << 3) | STREAM_PARTITION)
        .random::<u64>();
    let cohort = FederatedCohort::partition(&data, cfg.k, part_seed)?;
    let lambdas = lambdas_for(cfg, &cohort, &data)?;
    let trace = run_trace(cfg, &cohort, &lambdas)?;
    let iterate_errors: Vec<f64> =
        trace.iterates.iter().map(|b| l2_error(b, &beta_star)).collect();
    let full = full_sample_lasso(&data, lambdas.full, &solver_opts())?;
    let one = baseline_estimator(&cohort, Baseline::OneCenter, lambdas.local, lambdas.nodewise, &solver_opts())?;
    let avg = baseline_estimator(&cohort, Baseline::Average, lambdas.local, lambdas.nodewise, &solver_opts())?;
    let deb = baseline_estimator(
        &cohort,
        Baseline::AverageDebiased,
        lambdas.local,
        lambdas.nodewise,
        &solver_opts(),
    )?;
    Ok(EstimationRep {
        rep,
        iterate_errors,
        full_error: l2_error(&full, &beta_star),
        one_center_error: l2_error(&one, &beta_star),
        average_error: l2_error(&avg, &beta_star),
        average_debiased_error: l2_error(&deb, &beta_star),
    })
}

fn test_rep(cfg: &SimConfig, rep: usize) -> Result<TestRep> {
    let data = generate_dataset(cfg, rep as u64)?;
    let part_seed = stats::rng_for(cfg.seed, ((rep as u64) << 3) | STREAM_PARTITION)
        .random::<u64>();
    let cohort = FederatedCohort::partition(&data, cfg.k, part_seed)?;
    let lambdas = lambdas_for(cfg, &cohort, &data)?;
    let trace = run_trace(cfg, &cohort, &lambdas)?;
    let (bt, bh) = trace.inference_pair()?;
    let report = decorrelated_score_inference(&cohort, bt, bh, 0, cfg.alpha, lambdas.w)?;

    let full = full_sample_test(cfg, &data)?;
    Ok(TestRep {
        rep,
        p_value: report.p_value,
        reject: report.reject,
        full_p_value: full.p_value,
        full_reject: full.reject,
    })
}

/// Decorrelated score test built on the full-sample estimator (the K = 1
/// reduction of the same machinery).
pub fn full_sample_test(cfg: &SimConfig, data: &SurvivalDataset) -> Result<InferenceReport> {
    let single = FederatedCohort::partition(data, 1, 0)?;
    let lam_full = theory_scale_lambda(data, cfg.tuning.c_full)?;
    let lam_w = theory_scale_lambda(data, cfg.tuning.c_w)?;
    let beta_full = full_sample_lasso(data, lam_full, &solver_opts())?;
    // with one center the GEL shift vanishes, so beta_tilde = beta_hat
    decorrelated_score_inference(&single, &beta_full, &beta_full, 0, cfg.alpha, lam_w)
}

fn coverage_rep(cfg: &SimConfig, rep: usize) -> Result<CoverageRep> {
    let beta_star = cfg.effective_beta_star();
    let truth = beta_star[0];
    let data = generate_dataset(cfg, rep as u64)?;
    let part_seed = stats::rng_for(cfg.seed, ((rep as u64) << 3) | STREAM_PARTITION)
        .random::<u64>();
    let cohort = FederatedCohort::partition(&data, cfg.k, part_seed)?;
    let lambdas = lambdas_for(cfg, &cohort, &data)?;
    let trace = run_trace(cfg, &cohort, &lambdas)?;
    let (bt, bh) = trace.inference_pair()?;
    let target = LinearFunctionalTarget::coordinate(0, cfg.p, cfg.alpha)?;
    let report = linear_functional_inference(&cohort, bt, bh, &target, lambdas.omega)?;
    let covered = report.ci_low <= truth && truth <= report.ci_high;
    let standardized = if report.variance > 0.0 {
        (cfg.n as f64).sqrt() * (report.estimate - truth) / report.variance.sqrt()
    } else {
        0.0
    };
    Ok(CoverageRep {
        rep,
        estimate: report.estimate,
        variance: report.variance,
        ci_low: report.ci_low,
        ci_high: report.ci_high,
        covered,
        width: report.ci_high - report.ci_low,
        standardized,
    })
}

/// Run a Monte-Carlo study. Replications are parallel; failed replications
/// are recorded with their reason and excluded from the aggregates.
pub fn run_experiment(cfg: &SimConfig, study: Study) -> Result<ExperimentReport> {
    cfg.validate()?;
    let effective = match study {
        Study::TestSize => {
            let mut c = cfg.clone();
            c.nu_star = 0.0;
            c
        }
        _ => cfg.clone(),
    };

    let results: Vec<(usize, std::result::Result<Box<StudyRep>, String>)> = (0..effective
        .replications)
        .into_par_iter()
        .map(|rep| {
            let out = match study {
                Study::Estimation => {
                    estimation_rep(&effective, rep).map(|r| Box::new(StudyRep::Estimation(r)))
                }
                Study::TestSize | Study::TestPower => {
                    test_rep(&effective, rep).map(|r| Box::new(StudyRep::Test(r)))
                }
                Study::CiCoverage => {
                    coverage_rep(&effective, rep).map(|r| Box::new(StudyRep::Coverage(r)))
                }
            };
            (rep, out.map_err(|e| e.to_string()))
        })
        .collect();

    let mut failures = Vec::new();
    let mut est = Vec::new();
    let mut tst = Vec::new();
    let mut cov = Vec::new();
    for (rep, result) in results {
        match result {
            Ok(boxed) => match *boxed {
                StudyRep::Estimation(r) => est.push(r),
                StudyRep::Test(r) => tst.push(r),
                StudyRep::Coverage(r) => cov.push(r),
            },
            Err(msg) => failures.push((rep, msg)),
        }
    }

    let (outcome, aggregates) = match study {
        Study::Estimation => {
            let agg = aggregate_estimation(&est, effective.seed);
            (StudyOutcome::Estimation(est), agg)
        }
        Study::TestSize | Study::TestPower => {
            let agg = aggregate_test(&tst);
            (StudyOutcome::Test(tst), agg)
        }
        Study::CiCoverage => {
            let agg = aggregate_coverage(&cov, effective.seed);
            (StudyOutcome::Coverage(cov), agg)
        }
    };

    Ok(ExperimentReport { study, config: effective, outcome, failures, aggregates })
}

enum StudyRep {
    Estimation(EstimationRep),
    Test(TestRep),
    Coverage(CoverageRep),
}

fn aggregate_estimation(reps: &[EstimationRep], seed: u64) -> BTreeMap<String, f64> {
    let mut agg = BTreeMap::new();
    if reps.is_empty() {
        return agg;
    }
    agg.insert("replications".into(), reps.len() as f64);
    let rounds = reps[0].iterate_errors.len();
    for t in 0..rounds {
        let errs: Vec<f64> = reps.iter().map(|r| r.iterate_errors[t]).collect();
        agg.insert(format!("median_err_t{t}"), stats::median(&errs));
        agg.insert(
            format!("se_median_err_t{t}"),
            stats::bootstrap_median_se(&errs, 1000, seed ^ t as u64),
        );
    }
    for (name, pick) in [
        ("full", &(|r: &EstimationRep| r.full_error) as &dyn Fn(&EstimationRep) -> f64),
        ("one_center", &|r: &EstimationRep| r.one_center_error),
        ("average", &|r: &EstimationRep| r.average_error),
        ("average_debiased", &|r: &EstimationRep| r.average_debiased_error),
    ] {
        let errs: Vec<f64> = reps.iter().map(|r| pick(r)).collect();
        agg.insert(format!("median_err_{name}"), stats::median(&errs));
        agg.insert(
            format!("se_median_err_{name}"),
            stats::bootstrap_median_se(&errs, 1000, seed ^ 0xbeef),
        );
    }
    agg
}

fn aggregate_test(reps: &[TestRep]) -> BTreeMap<String, f64> {
    let mut agg = BTreeMap::new();
    if reps.is_empty() {
        return agg;
    }
    let n = reps.len();
    agg.insert("replications".into(), n as f64);
    let rate = reps.iter().filter(|r| r.reject).count() as f64 / n as f64;
    let full_rate = reps.iter().filter(|r| r.full_reject).count() as f64 / n as f64;
    agg.insert("rejection_rate".into(), rate);
    agg.insert("rejection_rate_se".into(), stats::proportion_se(rate, n));
    agg.insert("full_rejection_rate".into(), full_rate);
    agg.insert("full_rejection_rate_se".into(), stats::proportion_se(full_rate, n));
    let pvals: Vec<f64> = reps.iter().map(|r| r.p_value).collect();
    agg.insert("ks_uniform".into(), stats::ks_uniform_statistic(&pvals));
    let full_pvals: Vec<f64> = reps.iter().map(|r| r.full_p_value).collect();
    agg.insert("full_ks_uniform".into(), stats::ks_uniform_statistic(&full_pvals));
    agg
}

fn aggregate_coverage(reps: &[CoverageRep], seed: u64) -> BTreeMap<String, f64> {
    let mut agg = BTreeMap::new();
    if reps.is_empty() {
        return agg;
    }
    let n = reps.len();
    agg.insert("replications".into(), n as f64);
    let coverage = reps.iter().filter(|r| r.covered).count() as f64 / n as f64;
    agg.insert("coverage".into(), coverage);
    agg.insert("coverage_se".into(), stats::proportion_se(coverage, n));
    let widths: Vec<f64> = reps.iter().map(|r| r.width).collect();
    agg.insert("median_width".into(), stats::median(&widths));
    agg.insert("se_median_width".into(), stats::bootstrap_median_se(&widths, 1000, seed ^ 0x77));
    let z: Vec<f64> = reps.iter().map(|r| r.standardized).collect();
    agg.insert("anderson_darling".into(), stats::anderson_darling_normal(&z));
    agg
}

// ---------------------------------------------------------------------------
// Real-data study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CindexRep {
    pub rep: usize,
    pub iterated: f64,
    pub full: f64,
    pub one_center: f64,
    pub average_debiased: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CindexReport {
    pub replications: usize,
    pub screen_top: usize,
    pub k: usize,
    pub rounds: usize,
    pub reps: Vec<CindexRep>,
    pub failures: Vec<(usize, String)>,
    pub aggregates: BTreeMap<String, f64>,
}

/// Out-of-sample concordance study on a user-supplied dataset: repeated
/// 0.8/0.2 splits, univariate screening to `screen_top` features on the
/// training part, `k` centers, and the IPW concordance on the held-out
/// part for the iterated, full-sample, one-center, and debiased-average
/// estimators.
pub fn run_cindex_study(
    data: &SurvivalDataset,
    k: usize,
    rounds: usize,
    screen_top: usize,
    replications: usize,
    seed: u64,
    tuning: &TuningConfig,
) -> Result<CindexReport> {
    if data.n() < 10 {
        return Err(Error::invalid("dataset too small for a split study"));
    }
    let results: Vec<(usize, std::result::Result<CindexRep, String>)> = (0..replications)
        .into_par_iter()
        .map(|rep| (rep, cindex_rep(data, k, rounds, screen_top, seed, rep, tuning).map_err(|e| e.to_string())))
        .collect();
    let mut reps = Vec::new();
    let mut failures = Vec::new();
    for (rep, r) in results {
        match r {
            Ok(v) => reps.push(v),
            Err(msg) => failures.push((rep, msg)),
        }
    }
    let mut aggregates = BTreeMap::new();
    if !reps.is_empty() {
        let n = reps.len();
        for (name, pick) in [
            ("iterated", &(|r: &CindexRep| r.iterated) as &dyn Fn(&CindexRep) -> f64),
            ("full", &|r: &CindexRep| r.full),
            ("one_center", &|r: &CindexRep| r.one_center),
            ("average_debiased", &|r: &CindexRep| r.average_debiased),
        ] {
            let vals: Vec<f64> = reps.iter().map(|r| pick(r)).collect();
            let mean = stats::mean(&vals);
            aggregates.insert(format!("mean_{name}"), mean);
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n.max(2) - 1) as f64;
            aggregates.insert(format!("se_{name}"), (var / n as f64).sqrt());
        }
    }
    Ok(CindexReport {
        replications,
        screen_top,
        k,
        rounds,
        reps,
        failures,
        aggregates,
    })
}

fn cindex_rep(
    data: &SurvivalDataset,
    k: usize,
    rounds: usize,
    screen_top: usize,
    seed: u64,
    rep: usize,
    tuning: &TuningConfig,
) -> Result<CindexRep> {
    use rand::seq::SliceRandom;
    let n = data.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, ((rep as u64) << 3) | STREAM_SPLIT));
    // 0.8/0.2 split, trimmed so the training size is a multiple of K
    let mut train_size = (n as f64 * 0.8).floor() as usize;
    train_size -= train_size % k;
    let (train_idx, test_idx) = order.split_at(train_size);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train_all = data.subset(&train_idx)?;
    let test_all = data.subset(&test_idx)?;

    let features = screen_top_features(&train_all, screen_top.min(train_all.p()))?;
    let train = select_features(&train_all, &features)?;
    let test = select_features(&test_all, &features)?;

    let part_seed = rng_for(seed, ((rep as u64) << 3) | STREAM_PARTITION).random::<u64>();
    let cohort = FederatedCohort::partition(&train, k, part_seed)?;
    let lam_local = theory_scale_lambda(cohort.principal_data(), tuning.c_local)?;
    let lam_gel = theory_scale_lambda(cohort.principal_data(), tuning.c_gel)?;
    let lam_full = theory_scale_lambda(&train, tuning.c_full)?;
    let lam_node = theory_scale_lambda(cohort.principal_data(), tuning.c_nodewise)?;

    let trace = gel_iterate(
        &cohort,
        rounds,
        &LambdaSchedule::Constant(lam_gel),
        &GelInit::LocalLasso { lambda0: lam_local },
        &solver_opts(),
    )?;
    if let Some((round, msg)) = &trace.failure {
        return Err(Error::invalid(format!("round {round} failed: {msg}")));
    }
    let full = full_sample_lasso(&train, lam_full, &solver_opts())?;
    let one =
        baseline_estimator(&cohort, Baseline::OneCenter, lam_local, lam_node, &solver_opts())?;
    let deb = baseline_estimator(
        &cohort,
        Baseline::AverageDebiased,
        lam_local,
        lam_node,
        &solver_opts(),
    )?;

    Ok(CindexRep {
        rep,
        iterated: c_index_ipw(&train, &test, trace.last(), None)?.c_index,
        full: c_index_ipw(&train, &test, &full, None)?.c_index,
        one_center: c_index_ipw(&train, &test, &one, None)?.c_index,
        average_debiased: c_index_ipw(&train, &test, &deb, None)?.c_index,
    })
}

fn select_features(data: &SurvivalDataset, features: &[usize]) -> Result<SurvivalDataset> {
    let n = data.n();
    let mut x = Array2::zeros((n, features.len()));
    for (col, &j) in features.iter().enumerate() {
        for i in 0..n {
            x[(i, col)] = data.covariates()[(i, j)];
        }
    }
    SurvivalDataset::with_options(
        data.times().to_vec(),
        data.events().to_vec(),
        x,
        TiesPolicy::Reject,
        Some(data.study_end()),
    )
}

/// In-process and stream runs of the same experiment must agree; this
/// helper reruns a trace over the stream transport for spot checks.
pub fn trace_over_transport(
    cfg: &SimConfig,
    rep: usize,
    transport: TransportKind,
) -> Result<crate::federation::GelTrace> {
    let data = generate_dataset(cfg, rep as u64)?;
    let part_seed =
        stats::rng_for(cfg.seed, ((rep as u64) << 3) | STREAM_PARTITION).random::<u64>();
    let cohort =
        FederatedCohort::partition_with(&data, cfg.k, part_seed, transport, solver_opts())?;
    let lambdas = lambdas_for(cfg, &cohort, &data)?;
    run_trace(cfg, &cohort, &lambdas)
}
