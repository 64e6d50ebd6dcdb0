//! Shared oracle helpers for integration tests: literal-formula
//! evaluations kept deliberately independent of the library's sweep-based
//! implementations.

#![allow(dead_code)]

use fedcox_core::survival::SurvivalDataset;
use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// Random dataset with distinct times: standard-normal covariates,
/// uniformly spaced then shuffled times, Bernoulli censoring.
pub fn random_dataset(rng: &mut ChaCha12Rng, n: usize, p: usize, censor_frac: f64) -> SurvivalDataset {
    let mut times: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.37 + rng.random_range(0.0..0.05)).collect();
    // shuffle ordering of rows so sorted order is nontrivial
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        times.swap(i, j);
    }
    let events: Vec<bool> = (0..n).map(|_| rng.random_range(0.0..1.0) >= censor_frac).collect();
    let events = ensure_one_event(events);
    let x = Array2::from_shape_fn((n, p), |_| rng.sample::<f64, _>(StandardNormal));
    SurvivalDataset::new(times, events, x).unwrap()
}

fn ensure_one_event(mut events: Vec<bool>) -> Vec<bool> {
    if !events.iter().any(|&e| e) {
        events[0] = true;
    }
    events
}

/// Literal S^(l) sums over subjects.
pub fn brute_risk_set(
    d: &SurvivalDataset,
    beta: ArrayView1<'_, f64>,
    t: f64,
) -> (f64, Array1<f64>, Array2<f64>) {
    let n = d.n();
    let p = d.p();
    let mut s0 = 0.0;
    let mut s1 = Array1::zeros(p);
    let mut s2 = Array2::zeros((p, p));
    for i in 0..n {
        if d.times()[i] >= t {
            let x = d.covariate_row(i);
            let w = x.dot(&beta).exp();
            s0 += w;
            for a in 0..p {
                s1[a] += w * x[a];
                for b in 0..p {
                    s2[(a, b)] += w * x[a] * x[b];
                }
            }
        }
    }
    let nf = n as f64;
    (s0 / nf, s1 / nf, s2 / nf)
}

/// Literal loss: -(1/n) sum over events of [eta_i - log(sum over risk set of exp eta)].
pub fn brute_loss(d: &SurvivalDataset, beta: ArrayView1<'_, f64>) -> f64 {
    let n = d.n();
    let mut acc = 0.0;
    for i in 0..n {
        if !d.events()[i] {
            continue;
        }
        let eta_i = d.covariate_row(i).dot(&beta);
        let mut denom = 0.0;
        for l in 0..n {
            if d.times()[l] >= d.times()[i] {
                denom += d.covariate_row(l).dot(&beta).exp();
            }
        }
        acc += eta_i - denom.ln();
    }
    -acc / n as f64
}

/// Literal gradient: -(1/n) sum over events of (x_i - weighted risk-set mean).
pub fn brute_gradient(d: &SurvivalDataset, beta: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = d.n();
    let p = d.p();
    let mut grad = Array1::zeros(p);
    for i in 0..n {
        if !d.events()[i] {
            continue;
        }
        let mut denom = 0.0;
        let mut num = Array1::zeros(p);
        for l in 0..n {
            if d.times()[l] >= d.times()[i] {
                let w = d.covariate_row(l).dot(&beta).exp();
                denom += w;
                num.scaled_add(w, &d.covariate_row(l));
            }
        }
        let xbar = num / denom;
        grad.scaled_add(-1.0, &d.covariate_row(i));
        grad += &xbar;
    }
    grad / n as f64
}

/// Cholesky solve of a symmetric positive-definite system (test-only
/// reference for population quantities).
pub fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                assert!(sum > 0.0, "matrix not positive definite");
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    // forward then back substitution
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[(i, k)] * y[k];
        }
        y[i] = sum / l[(i, i)];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[(k, i)] * x[k];
        }
        x[i] = sum / l[(i, i)];
    }
    x
}
