//! Cox partial-likelihood machinery for right-censored, time-fixed
//! covariates: risk-set quantities, loss, gradient, Hessian, Hessian-vector
//! products, and the per-subject working derivatives used by the penalized
//! weighted-least-squares solver.
//!
//! All sweeps run over a cached descending-time permutation, so every
//! evaluation is a single `O(n)` pass (times the per-subject cost) after an
//! `O(n log n)` setup. Risk-set exponentials are accumulated against a
//! running maximum of the linear predictor, which keeps the ratios finite
//! for linear predictors far outside the well-scaled regime.

use crate::error::{Error, Result};
use crate::stats::rng_for;
use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use std::io::Read;
use std::path::Path;

/// Dense Hessians above this dimension are refused; use
/// [`SurvivalDataset::hessian_vector_product`] instead.
pub const DEFAULT_DENSE_CAP: usize = 2000;

/// How to handle tied observation times. The likelihood machinery assumes
/// distinct times; real data may not comply.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TiesPolicy {
    /// Error out on the first tie encountered.
    Reject,
    /// Break ties by adding a seeded, deterministic `1e-9 * rank`
    /// perturbation within each tied group.
    Jitter { seed: u64 },
}

/// Right-censored survival data with time-fixed covariates.
///
/// Immutable after construction; all operations are pure functions, so a
/// dataset can be shared freely across threads.
#[derive(Debug, Clone)]
pub struct SurvivalDataset {
    times: Vec<f64>,
    events: Vec<bool>,
    covariates: Array2<f64>,
    study_end: f64,
    /// Subject indices sorted by descending observation time.
    desc: Vec<usize>,
    /// Subject indices sorted by ascending observation time.
    asc: Vec<usize>,
    n_events: usize,
    dense_cap: usize,
}

/// Risk-set aggregates at a fixed time: `s0` is the scalar weight mass,
/// `s1` the weighted covariate sum, `s2` the weighted outer-product sum
/// (materialized on demand), each scaled by `1/n`.
#[derive(Debug, Clone)]
pub struct RiskSetSnapshot {
    pub s0: f64,
    pub s1: Array1<f64>,
    pub s2: Option<Array2<f64>>,
}

impl RiskSetSnapshot {
    /// Weighted covariate mean `s1 / s0` of the risk set.
    pub fn covariate_mean(&self) -> Option<Array1<f64>> {
        (self.s0 > 0.0).then(|| &self.s1 / self.s0)
    }
}

/// Per-subject first and second derivatives of the loss with respect to
/// the linear predictor, consumed by the penalized WLS solver.
#[derive(Debug, Clone)]
pub struct WorkingDerivatives {
    /// d loss / d eta_i
    pub grad: Vec<f64>,
    /// d^2 loss / d eta_i^2 (diagonal approximation; always >= 0)
    pub weight: Vec<f64>,
}

impl SurvivalDataset {
    /// Build a dataset rejecting tied times, with `tau` defaulting to the
    /// largest observed time.
    pub fn new(times: Vec<f64>, events: Vec<bool>, covariates: Array2<f64>) -> Result<Self> {
        Self::with_options(times, events, covariates, TiesPolicy::Reject, None)
    }

    pub fn with_options(
        mut times: Vec<f64>,
        events: Vec<bool>,
        covariates: Array2<f64>,
        ties: TiesPolicy,
        study_end: Option<f64>,
    ) -> Result<Self> {
        let n = times.len();
        if n == 0 {
            return Err(Error::invalid("dataset must contain at least one subject"));
        }
        if events.len() != n || covariates.nrows() != n {
            return Err(Error::invalid(format!(
                "length mismatch: {} times, {} events, {} covariate rows",
                n,
                events.len(),
                covariates.nrows()
            )));
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::invalid("times must be finite and nonnegative"));
        }
        if covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("covariate entries must be finite"));
        }
        resolve_ties(&mut times, ties)?;

        let max_time = times.iter().cloned().fold(0.0f64, f64::max);
        let study_end = match study_end {
            Some(tau) => {
                if !tau.is_finite() || tau < max_time {
                    return Err(Error::invalid(format!(
                        "study_end {tau} must be finite and cover the largest time {max_time}"
                    )));
                }
                tau
            }
            None => max_time,
        };

        let mut asc: Vec<usize> = (0..n).collect();
        asc.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
        let desc: Vec<usize> = asc.iter().rev().cloned().collect();
        let n_events = events.iter().filter(|&&e| e).count();
        if n_events == 0 {
            log::warn!("dataset has no events; partial-likelihood quantities are degenerate");
        }

        Ok(Self {
            times,
            events,
            covariates,
            study_end,
            desc,
            asc,
            n_events,
            dense_cap: DEFAULT_DENSE_CAP,
        })
    }

    pub fn n(&self) -> usize {
        self.times.len()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn n_events(&self) -> usize {
        self.n_events
    }

    pub fn study_end(&self) -> f64 {
        self.study_end
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(i)
    }

    /// Largest absolute covariate entry (the empirical bound used by the
    /// rate-scaled regularization rule).
    pub fn max_abs_covariate(&self) -> f64 {
        self.covariates.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn set_dense_cap(&mut self, cap: usize) {
        self.dense_cap = cap;
    }

    /// New dataset with the given rows (used for partitioning and splits).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let times: Vec<f64> = indices.iter().map(|&i| self.times[i]).collect();
        let events: Vec<bool> = indices.iter().map(|&i| self.events[i]).collect();
        let mut x = Array2::zeros((indices.len(), self.p()));
        for (row, &i) in indices.iter().enumerate() {
            x.row_mut(row).assign(&self.covariates.row(i));
        }
        // Times inside a subset of a valid dataset are already distinct.
        Self::with_options(times, events, x, TiesPolicy::Reject, Some(self.study_end))
    }

    /// New dataset with globally centered covariate columns.
    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        let means = column_means(&self.covariates);
        for j in 0..out.p() {
            let m = means[j];
            out.covariates.column_mut(j).mapv_inplace(|x| x - m);
        }
        out
    }

    fn check_beta(&self, beta: ArrayView1<'_, f64>) -> Result<()> {
        if beta.len() != self.p() {
            return Err(Error::invalid(format!(
                "beta has length {}, expected {}",
                beta.len(),
                self.p()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta must be finite"));
        }
        Ok(())
    }

    fn linear_predictor(&self, beta: ArrayView1<'_, f64>) -> Vec<f64> {
        (0..self.n()).map(|i| self.covariates.row(i).dot(&beta)).collect()
    }

    /// S^(0), S^(1), and optionally S^(2) at time `t`: `1/n` times the
    /// risk-set-weighted sums of `x^{(x)l} exp(x'beta)` over subjects with
    /// `Z_i >= t`.
    pub fn risk_set_quantities(
        &self,
        beta: ArrayView1<'_, f64>,
        t: f64,
        materialize_s2: bool,
    ) -> Result<RiskSetSnapshot> {
        self.check_beta(beta)?;
        if !t.is_finite() || t < 0.0 {
            return Err(Error::invalid("t must be finite and nonnegative"));
        }
        let p = self.p();
        let nf = self.n() as f64;
        let eta = self.linear_predictor(beta);
        let mut cmax = f64::NEG_INFINITY;
        for i in 0..self.n() {
            if self.times[i] >= t {
                cmax = cmax.max(eta[i]);
            }
        }
        if cmax == f64::NEG_INFINITY {
            // Empty risk set.
            return Ok(RiskSetSnapshot {
                s0: 0.0,
                s1: Array1::zeros(p),
                s2: materialize_s2.then(|| Array2::zeros((p, p))),
            });
        }
        let mut r0 = 0.0;
        let mut r1 = Array1::<f64>::zeros(p);
        let mut r2 = materialize_s2.then(|| Array2::<f64>::zeros((p, p)));
        for i in 0..self.n() {
            if self.times[i] < t {
                continue;
            }
            let w = (eta[i] - cmax).exp();
            let x = self.covariates.row(i);
            r0 += w;
            r1.scaled_add(w, &x);
            if let Some(ref mut m) = r2 {
                outer_add(m, x, w);
            }
        }
        let scale = cmax.exp() / nf;
        Ok(RiskSetSnapshot {
            s0: r0 * scale,
            s1: r1 * scale,
            s2: r2.map(|m| m * scale),
        })
    }

    /// Average negative log-partial likelihood.
    ///
    /// Returns 0 for a dataset without events (degenerate but defined; a
    /// warning is logged at construction).
    pub fn neg_log_partial_likelihood(&self, beta: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_beta(beta)?;
        if self.n_events == 0 {
            return Ok(0.0);
        }
        let eta = self.linear_predictor(beta);
        let mut c = f64::NEG_INFINITY;
        let mut r0 = 0.0f64;
        let mut acc = 0.0f64;
        for &i in &self.desc {
            let e = eta[i];
            if e > c {
                if c > f64::NEG_INFINITY {
                    r0 *= (c - e).exp();
                }
                c = e;
            }
            r0 += (eta[i] - c).exp();
            if self.events[i] {
                acc += eta[i] - (c + r0.ln());
            }
        }
        Ok(-acc / self.n() as f64)
    }

    /// Gradient of the loss: `-(1/n) sum_{events} (x_i - risk-set mean)`.
    pub fn gradient(&self, beta: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        self.check_beta(beta)?;
        let p = self.p();
        let mut grad = Array1::<f64>::zeros(p);
        if self.n_events == 0 {
            return Ok(grad);
        }
        let eta = self.linear_predictor(beta);
        let mut c = f64::NEG_INFINITY;
        let mut r0 = 0.0f64;
        let mut r1 = Array1::<f64>::zeros(p);
        for &i in &self.desc {
            let e = eta[i];
            if e > c {
                if c > f64::NEG_INFINITY {
                    let f = (c - e).exp();
                    r0 *= f;
                    r1 *= f;
                }
                c = e;
            }
            let w = (eta[i] - c).exp();
            let x = self.covariates.row(i);
            r0 += w;
            r1.scaled_add(w, &x);
            if self.events[i] {
                grad.scaled_add(-1.0, &x);
                grad.scaled_add(1.0 / r0, &r1);
            }
        }
        Ok(grad / self.n() as f64)
    }

    /// Dense Hessian `(1/n) sum_{events} V(beta, Z_i)`; symmetric PSD.
    pub fn hessian(&self, beta: ArrayView1<'_, f64>) -> Result<Array2<f64>> {
        self.check_beta(beta)?;
        let p = self.p();
        if p > self.dense_cap {
            return Err(Error::Capacity { p, cap: self.dense_cap });
        }
        let mut hess = Array2::<f64>::zeros((p, p));
        if self.n_events == 0 {
            return Ok(hess);
        }
        let eta = self.linear_predictor(beta);
        let mut c = f64::NEG_INFINITY;
        let mut r0 = 0.0f64;
        let mut r1 = Array1::<f64>::zeros(p);
        let mut r2 = Array2::<f64>::zeros((p, p));
        for &i in &self.desc {
            let e = eta[i];
            if e > c {
                if c > f64::NEG_INFINITY {
                    let f = (c - e).exp();
                    r0 *= f;
                    r1 *= f;
                    r2 *= f;
                }
                c = e;
            }
            let w = (eta[i] - c).exp();
            let x = self.covariates.row(i);
            r0 += w;
            r1.scaled_add(w, &x);
            outer_add(&mut r2, x, w);
            if self.events[i] {
                // V = R2/r0 - (r1/r0)(r1/r0)'
                let inv = 1.0 / r0;
                let inv2 = inv * inv;
                for a in 0..p {
                    let ra = r1[a];
                    for b in 0..p {
                        hess[(a, b)] += r2[(a, b)] * inv - ra * r1[b] * inv2;
                    }
                }
            }
        }
        Ok(hess / self.n() as f64)
    }

    /// `hessian(beta) . v` in `O(n p)` without materializing the matrix.
    pub fn hessian_vector_product(
        &self,
        beta: ArrayView1<'_, f64>,
        v: ArrayView1<'_, f64>,
    ) -> Result<Array1<f64>> {
        self.check_beta(beta)?;
        if v.len() != self.p() {
            return Err(Error::invalid("v has wrong length"));
        }
        let p = self.p();
        let mut out = Array1::<f64>::zeros(p);
        if self.n_events == 0 {
            return Ok(out);
        }
        let eta = self.linear_predictor(beta);
        let mut c = f64::NEG_INFINITY;
        let mut r0 = 0.0f64;
        let mut r1 = Array1::<f64>::zeros(p);
        // rv = sum w * x * (x'v); s = sum w * (x'v)
        let mut rv = Array1::<f64>::zeros(p);
        let mut s = 0.0f64;
        for &i in &self.desc {
            let e = eta[i];
            if e > c {
                if c > f64::NEG_INFINITY {
                    let f = (c - e).exp();
                    r0 *= f;
                    r1 *= f;
                    rv *= f;
                    s *= f;
                }
                c = e;
            }
            let w = (eta[i] - c).exp();
            let x = self.covariates.row(i);
            let xv = x.dot(&v);
            r0 += w;
            r1.scaled_add(w, &x);
            rv.scaled_add(w * xv, &x);
            s += w * xv;
            if self.events[i] {
                let inv = 1.0 / r0;
                out.scaled_add(inv, &rv);
                out.scaled_add(-s * inv * inv, &r1);
            }
        }
        Ok(out / self.n() as f64)
    }

    /// First and second derivatives of the loss with respect to each
    /// subject's linear predictor (the glmnet-style diagonal working
    /// weights), at the given `eta = X beta`.
    pub fn working_derivatives(&self, eta: &[f64]) -> WorkingDerivatives {
        let n = self.n();
        assert_eq!(eta.len(), n);
        let nf = n as f64;
        let mut grad = vec![0.0; n];
        let mut weight = vec![0.0; n];
        if self.n_events == 0 {
            return WorkingDerivatives { grad, weight };
        }
        let eta_max = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        // Descending pass: log of the (shifted) risk-set denominator at
        // each event time.
        let mut log_denom = vec![0.0f64; n]; // valid only at event indices
        {
            let mut c = f64::NEG_INFINITY;
            let mut r0 = 0.0f64;
            for &i in &self.desc {
                let e = eta[i] - eta_max;
                if e > c {
                    if c > f64::NEG_INFINITY {
                        r0 *= (c - e).exp();
                    }
                    c = e;
                }
                r0 += (e - c).exp();
                if self.events[i] {
                    log_denom[i] = c + r0.ln();
                }
            }
        }

        // Ascending pass: cumulative sums over events with Z_event <= Z_r.
        let mut cum_a = 0.0f64; // sum of 1/denom
        let mut cum_b = 0.0f64; // sum of 1/denom^2
        for &r in &self.asc {
            if self.events[r] {
                let inv = (-log_denom[r]).exp();
                cum_a += inv;
                cum_b += inv * inv;
            }
            let er = (eta[r] - eta_max).exp();
            let d = if self.events[r] { 1.0 } else { 0.0 };
            grad[r] = -(d - er * cum_a) / nf;
            weight[r] = (er * cum_a - er * er * cum_b).max(0.0) / nf;
        }
        WorkingDerivatives { grad, weight }
    }
}

fn outer_add(m: &mut Array2<f64>, x: ArrayView1<'_, f64>, w: f64) {
    let p = x.len();
    for a in 0..p {
        let wa = w * x[a];
        for b in 0..p {
            m[(a, b)] += wa * x[b];
        }
    }
}

pub fn column_means(x: &Array2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|j| x.column(j).sum() / n).collect()
}

fn resolve_ties(times: &mut [f64], policy: TiesPolicy) -> Result<()> {
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap());
    let mut has_tie = false;
    for w in order.windows(2) {
        if times[w[0]] == times[w[1]] {
            match policy {
                TiesPolicy::Reject => {
                    return Err(Error::TiedTimes {
                        time: times[w[0]],
                        first: w[0].min(w[1]),
                        second: w[0].max(w[1]),
                    });
                }
                TiesPolicy::Jitter { .. } => has_tie = true,
            }
        }
    }
    if !has_tie {
        return Ok(());
    }
    let TiesPolicy::Jitter { seed } = policy else { unreachable!() };
    let mut rng = rng_for(seed, 0x6a69_7474);
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start + 1;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        if end - start > 1 {
            let mut group: Vec<usize> = order[start..end].to_vec();
            group.shuffle(&mut rng);
            for (rank, &idx) in group.iter().enumerate() {
                times[idx] = t + 1e-9 * (rank + 1) as f64;
            }
        }
        start = end;
    }
    // Pathological spacing could re-introduce a tie; verify.
    let mut check: Vec<f64> = times.to_vec();
    check.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in check.windows(2) {
        if w[0] == w[1] {
            return Err(Error::invalid(
                "jitter failed to separate tied times; times are too densely packed",
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File loading
// ---------------------------------------------------------------------------

/// On-disk layouts accepted by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// Comma-separated with header `time,event,x1..xp`, event in {0,1}.
    Csv,
    /// Tab-separated gene-expression layout: header row, then
    /// `time<TAB>status<TAB>features...` per patient. Missing feature
    /// values (empty, `NA`, or `?`) are median-imputed; columns are
    /// standardized; subjects with zero follow-up time are dropped.
    Dlbcl,
}

pub fn load_dataset(path: &Path, format: DataFormat, ties: TiesPolicy) -> Result<SurvivalDataset> {
    let mut file = std::fs::File::open(path)?;
    let mut contents = String::new();
    file.read_to_string(&mut contents)?;
    parse_dataset(&contents, format, ties)
}

pub fn parse_dataset(
    contents: &str,
    format: DataFormat,
    ties: TiesPolicy,
) -> Result<SurvivalDataset> {
    match format {
        DataFormat::Csv => parse_csv(contents, ties),
        DataFormat::Dlbcl => parse_dlbcl(contents, ties),
    }
}

fn parse_csv(contents: &str, ties: TiesPolicy) -> Result<SurvivalDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(contents.as_bytes());
    {
        let headers = reader.headers()?;
        if headers.len() < 2 || headers.get(0) != Some("time") || headers.get(1) != Some("event") {
            return Err(Error::invalid("csv header must start with `time,event`"));
        }
    }
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let t: f64 = field(&record, 0)?;
        let e: f64 = field(&record, 1)?;
        if e != 0.0 && e != 1.0 {
            return Err(Error::invalid(format!("event indicator must be 0 or 1, got {e}")));
        }
        times.push(t);
        events.push(e == 1.0);
        let row: Result<Vec<f64>> = (2..record.len()).map(|j| field(&record, j)).collect();
        rows.push(row?);
    }
    build_matrix(times, events, rows, ties)
}

fn parse_dlbcl(contents: &str, ties: TiesPolicy) -> Result<SurvivalDataset> {
    let mut lines = contents.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty dlbcl file"))?;
    let ncols = header.split('\t').count();
    if ncols < 3 {
        return Err(Error::invalid("dlbcl layout needs time, status, and features"));
    }
    let mut times = Vec::new();
    let mut events = Vec::new();
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != ncols {
            return Err(Error::invalid(format!(
                "ragged dlbcl row: {} fields, expected {ncols}",
                fields.len()
            )));
        }
        let t: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad time value {:?}", fields[0])))?;
        if t == 0.0 {
            // Zero follow-up carries no information; drop the subject.
            continue;
        }
        let e: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad status value {:?}", fields[1])))?;
        if e != 0.0 && e != 1.0 {
            return Err(Error::invalid(format!("status must be 0 or 1, got {e}")));
        }
        times.push(t);
        events.push(e == 1.0);
        let row: Result<Vec<Option<f64>>> = fields[2..]
            .iter()
            .map(|f| {
                let f = f.trim();
                if f.is_empty() || f.eq_ignore_ascii_case("na") || f == "?" {
                    Ok(None)
                } else {
                    f.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::invalid(format!("bad feature value {f:?}")))
                }
            })
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::invalid("dlbcl file has no usable subjects"));
    }
    let p = rows[0].len();
    // Median imputation per column, then standardization.
    let mut full: Vec<Vec<f64>> = vec![vec![0.0; p]; rows.len()];
    for j in 0..p {
        let observed: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
        let med = if observed.is_empty() { 0.0 } else { crate::stats::median(&observed) };
        for (i, r) in rows.iter().enumerate() {
            full[i][j] = r[j].unwrap_or(med);
        }
    }
    for j in 0..p {
        let col: Vec<f64> = full.iter().map(|r| r[j]).collect();
        let m = crate::stats::mean(&col);
        let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
        let sd = var.sqrt();
        for r in full.iter_mut() {
            r[j] = if sd > 0.0 { (r[j] - m) / sd } else { r[j] - m };
        }
    }
    build_matrix(times, events, full, ties)
}

fn field(record: &csv::StringRecord, j: usize) -> Result<f64> {
    record
        .get(j)
        .ok_or_else(|| Error::invalid(format!("missing field {j}")))?
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad numeric field {:?}", record.get(j).unwrap())))
}

fn build_matrix(
    times: Vec<f64>,
    events: Vec<bool>,
    rows: Vec<Vec<f64>>,
    ties: TiesPolicy,
) -> Result<SurvivalDataset> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("no data rows"));
    }
    let p = rows[0].len();
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("ragged covariate rows"));
    }
    let mut x = Array2::zeros((n, p));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[(i, j)] = v;
        }
    }
    SurvivalDataset::with_options(times, events, x, ties, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> SurvivalDataset {
        // 4 subjects, 2 covariates, distinct times.
        let times = vec![2.0, 1.0, 3.0, 0.5];
        let events = vec![true, true, false, true];
        let x = array![[1.0, 0.0], [0.5, -1.0], [-0.25, 2.0], [0.0, 0.3]];
        SurvivalDataset::new(times, events, x).unwrap()
    }

    #[test]
    fn s0_is_one_at_zero_beta_and_zero_time() {
        let d = toy();
        let beta = Array1::zeros(2);
        let snap = d.risk_set_quantities(beta.view(), 0.0, false).unwrap();
        assert!((snap.s0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_risk_set_is_zero() {
        let d = toy();
        let beta = array![0.3, -0.2];
        let snap = d.risk_set_quantities(beta.view(), 100.0, true).unwrap();
        assert_eq!(snap.s0, 0.0);
        assert!(snap.s1.iter().all(|&v| v == 0.0));
        assert!(snap.s2.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_subject_loss_and_gradient_vanish() {
        let d = SurvivalDataset::new(vec![1.0], vec![true], array![[2.0, -3.0]]).unwrap();
        let beta = array![0.7, 0.1];
        assert!(d.neg_log_partial_likelihood(beta.view()).unwrap().abs() < 1e-15);
        let g = d.gradient(beta.view()).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
        let h = d.hessian(beta.view()).unwrap();
        assert!(h.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn loss_at_zero_counts_risk_sets() {
        let d = toy();
        let beta = Array1::zeros(2);
        // events at t=0.5 (4 at risk), t=1.0 (3 at risk), t=2.0 (2 at risk)
        let expect = (4.0f64.ln() + 3.0f64.ln() + 2.0f64.ln()) / 4.0;
        let got = d.neg_log_partial_likelihood(beta.view()).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn identical_covariates_give_zero_gradient() {
        let x = Array2::from_shape_fn((5, 3), |_| 1.25);
        let d = SurvivalDataset::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![true, false, true, true, false],
            x,
        )
        .unwrap();
        let beta = array![0.4, -2.0, 0.9];
        let g = d.gradient(beta.view()).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn no_events_returns_zero_loss_and_gradient() {
        let d = SurvivalDataset::new(
            vec![1.0, 2.0],
            vec![false, false],
            array![[0.3], [1.0]],
        )
        .unwrap();
        let beta = array![0.5];
        assert_eq!(d.neg_log_partial_likelihood(beta.view()).unwrap(), 0.0);
        assert!(d.gradient(beta.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ties_rejected_by_default() {
        let r = SurvivalDataset::new(
            vec![1.0, 1.0],
            vec![true, true],
            array![[0.0], [1.0]],
        );
        assert!(matches!(r, Err(Error::TiedTimes { .. })));
    }

    #[test]
    fn jitter_separates_ties_deterministically() {
        let make = || {
            SurvivalDataset::with_options(
                vec![1.0, 1.0, 1.0, 2.0],
                vec![true, true, false, true],
                array![[0.0], [1.0], [2.0], [3.0]],
                TiesPolicy::Jitter { seed: 9 },
                None,
            )
            .unwrap()
        };
        let a = make();
        let b = make();
        assert_eq!(a.times(), b.times());
        let mut sorted = a.times().to_vec();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!(sorted.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn non_finite_beta_rejected() {
        let d = toy();
        let beta = array![f64::NAN, 0.0];
        assert!(d.gradient(beta.view()).is_err());
        assert!(d.risk_set_quantities(beta.view(), 0.0, false).is_err());
    }

    #[test]
    fn hessian_cap_enforced() {
        let mut d = toy();
        d.set_dense_cap(1);
        let beta = array![0.0, 0.0];
        assert!(matches!(d.hessian(beta.view()), Err(Error::Capacity { .. })));
    }

    #[test]
    fn csv_roundtrip() {
        let text = "time,event,x1,x2\n1.5,1,0.3,-0.2\n2.5,0,1.0,0.0\n";
        let d = parse_dataset(text, DataFormat::Csv, TiesPolicy::Reject).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.p(), 2);
        assert_eq!(d.events(), &[true, false]);
        assert_eq!(d.covariates()[(0, 1)], -0.2);
    }

    #[test]
    fn dlbcl_imputes_and_standardizes() {
        let text = "time\tstatus\tg1\tg2\n\
                    1.0\t1\t1.0\t5.0\n\
                    2.0\t0\tNA\t7.0\n\
                    0.0\t1\t9.9\t9.9\n\
                    3.0\t1\t3.0\t9.0\n";
        let d = parse_dataset(text, DataFormat::Dlbcl, TiesPolicy::Reject).unwrap();
        // zero follow-up row dropped
        assert_eq!(d.n(), 3);
        // NA imputed to median(1,3)=2, column standardized to mean 0
        let col: Vec<f64> = d.covariates().column(0).to_vec();
        assert!(col.iter().sum::<f64>().abs() < 1e-12);
        let var = col.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn centered_removes_column_means() {
        let d = toy().centered();
        for j in 0..d.p() {
            assert!(d.covariates().column(j).sum().abs() < 1e-12);
        }
    }
}
