//! Distributed estimation of the baseline hazard: the averaged Breslow
//! step estimator of the cumulative hazard, and a kernel-smoothed estimate
//! of the hazard itself. Centers ship per-event `(time, increment)` pairs
//! or pre-binned sums; covariates never move.

use crate::error::{Error, Result};
use crate::federation::FederatedCohort;
use ndarray::Array1;
use serde::{Deserialize, Serialize};

/// Right-continuous non-decreasing step function, zero before the first
/// knot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub domain_end: f64,
}

impl StepFunction {
    /// Build from `(time, jump)` pairs; times need not be sorted.
    pub fn from_increments(mut pairs: Vec<(f64, f64)>, domain_end: f64) -> Self {
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut knots = Vec::with_capacity(pairs.len());
        let mut values = Vec::with_capacity(pairs.len());
        let mut acc = 0.0;
        for (t, inc) in pairs {
            acc += inc;
            if knots.last() == Some(&t) {
                *values.last_mut().unwrap() = acc;
            } else {
                knots.push(t);
                values.push(acc);
            }
        }
        Self { knots, values, domain_end }
    }

    /// Value at `t` (right-continuous; 0 before the first knot).
    pub fn eval(&self, t: f64) -> f64 {
        match self.knots.partition_point(|k| *k <= t) {
            0 => 0.0,
            i => self.values[i - 1],
        }
    }

    /// Exact supremum of `|F(t) - t|` over `[0, t_end]`. The deviation
    /// against a linear target is extremal at interval endpoints, so knots
    /// plus the endpoint suffice.
    pub fn sup_deviation_vs_identity(&self, t_end: f64) -> f64 {
        let mut sup: f64 = 0.0;
        let mut prev_value = 0.0;
        for (i, &k) in self.knots.iter().enumerate() {
            if k > t_end {
                break;
            }
            // approaching the knot from the left, and at the knot
            sup = sup.max((prev_value - k).abs());
            sup = sup.max((self.values[i] - k).abs());
            prev_value = self.values[i];
        }
        sup.max((self.eval(t_end) - t_end).abs())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value\n");
        for (k, v) in self.knots.iter().zip(&self.values) {
            out.push_str(&format!("{k:.17e},{v:.17e}\n"));
        }
        out
    }
}

/// Smoothing kernels listed for the nonparametric hazard estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Epanechnikov,
    Gaussian,
}

impl Kernel {
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() <= 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }

    /// `K_h(x) = K(x/h)/h`.
    pub fn scaled(&self, x: f64, h: f64) -> f64 {
        self.eval(x / h) / h
    }
}

impl std::str::FromStr for Kernel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            "gaussian" => Ok(Kernel::Gaussian),
            other => Err(Error::invalid(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Sampled kernel-smoothed baseline hazard.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HazardCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
    pub kernel: Kernel,
}

impl HazardCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value\n");
        for (t, v) in self.grid.iter().zip(&self.values) {
            out.push_str(&format!("{t:.17e},{v:.17e}\n"));
        }
        out
    }
}

/// Averaged Breslow estimator of the cumulative baseline hazard:
/// each center contributes `1 / sum_{i in center} Y_i(s) exp(x_i'beta)`
/// at its own event times; the pooled step function averages over centers.
pub fn breslow(cohort: &FederatedCohort, beta_tilde: &Array1<f64>) -> Result<StepFunction> {
    let per_center = cohort.hazard_round(beta_tilde)?;
    let kf = cohort.k() as f64;
    let mut pairs = Vec::new();
    let mut domain_end = 0.0f64;
    for (times, incs) in per_center {
        for (t, inc) in times.iter().zip(&incs) {
            pairs.push((*t, *inc / kf));
            domain_end = domain_end.max(*t);
        }
    }
    for k in 0..cohort.k() {
        domain_end = domain_end.max(cohort.center_data(k).study_end());
    }
    Ok(StepFunction::from_increments(pairs, domain_end))
}

/// Binned variant: centers ship per-bin increment sums over a shared grid
/// instead of raw event times (coarser, but no subject-adjacent times
/// leave a center). Jumps are placed at bin right edges.
pub fn breslow_binned(
    cohort: &FederatedCohort,
    beta_tilde: &Array1<f64>,
    edges: &[f64],
) -> Result<StepFunction> {
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("bin edges must be strictly increasing"));
    }
    let per_center = cohort.hazard_round_binned(beta_tilde, edges)?;
    let kf = cohort.k() as f64;
    let mut pairs = Vec::with_capacity(edges.len() - 1);
    for b in 0..edges.len() - 1 {
        let total: f64 = per_center.iter().map(|sums| sums[b]).sum();
        pairs.push((edges[b + 1], total / kf));
    }
    Ok(StepFunction::from_increments(pairs, *edges.last().unwrap()))
}

/// Distributed kernel estimate of the baseline hazard on a grid:
/// `(1/K) sum_k sum_{events e in k} K_h(t - t_e) * increment_e`.
pub fn kernel_hazard(
    cohort: &FederatedCohort,
    beta_tilde: &Array1<f64>,
    h: f64,
    kernel: Kernel,
    grid: &[f64],
) -> Result<HazardCurve> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {h}")));
    }
    if grid.is_empty() {
        return Err(Error::invalid("empty evaluation grid"));
    }
    let per_center = cohort.hazard_round(beta_tilde)?;
    let kf = cohort.k() as f64;
    let values: Vec<f64> = grid
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for (times, incs) in &per_center {
                for (s, inc) in times.iter().zip(incs) {
                    acc += kernel.scaled(t - s, h) * inc;
                }
            }
            acc / kf
        })
        .collect();
    Ok(HazardCurve { grid: grid.to_vec(), values, bandwidth: h, kernel })
}

/// Default interior evaluation grid: `points` equispaced values on
/// `[h, tau - h]`, where the kernel estimate is not boundary-dominated.
pub fn default_grid(h: f64, tau: f64, points: usize) -> Vec<f64> {
    let lo = h;
    let hi = (tau - h).max(lo);
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points.max(2) - 1) as f64).collect()
}

/// Rate-guided default bandwidth `tau * n^{-1/5}`.
pub fn default_bandwidth(tau: f64, n: usize) -> f64 {
    tau * (n as f64).powf(-0.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_function_is_right_continuous_and_zero_before_first_knot() {
        let f = StepFunction::from_increments(vec![(2.0, 0.5), (1.0, 0.25)], 3.0);
        assert_eq!(f.knots, vec![1.0, 2.0]);
        assert_eq!(f.eval(0.99), 0.0);
        assert_eq!(f.eval(1.0), 0.25);
        assert_eq!(f.eval(1.5), 0.25);
        assert_eq!(f.eval(2.0), 0.75);
        assert_eq!(f.eval(99.0), 0.75);
    }

    #[test]
    fn sup_deviation_checks_both_sides_of_jumps() {
        // single unit jump at t = 1 on [0, 2]: worst gap is 1 at t -> 1^-...
        // |0 - 1| = 1 just before the jump, |1 - 2| = 1 at the end
        let f = StepFunction::from_increments(vec![(1.0, 1.0)], 2.0);
        assert!((f.sup_deviation_vs_identity(2.0) - 1.0).abs() < 1e-15);
        // identity-like staircase has small deviation
        let fine: Vec<(f64, f64)> = (1..=100).map(|i| (i as f64 / 100.0, 0.01)).collect();
        let g = StepFunction::from_increments(fine, 1.0);
        assert!(g.sup_deviation_vs_identity(1.0) <= 0.0100001);
    }

    #[test]
    fn kernel_values_match_formulas() {
        let e = Kernel::Epanechnikov;
        assert_eq!(e.eval(0.0), 0.75);
        assert_eq!(e.eval(1.0), 0.0);
        assert_eq!(e.eval(-1.2), 0.0);
        assert!((e.eval(0.5) - 0.75 * 0.75).abs() < 1e-15);
        let g = Kernel::Gaussian;
        assert!((g.eval(0.0) - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        // K_h scaling
        assert!((e.scaled(0.1, 0.2) - e.eval(0.5) / 0.2).abs() < 1e-15);
    }

    #[test]
    fn kernels_integrate_to_one() {
        // trapezoid quadrature on a wide range
        for kernel in [Kernel::Epanechnikov, Kernel::Gaussian] {
            let a = -10.0;
            let b = 10.0;
            let steps = 200_000;
            let dx = (b - a) / steps as f64;
            let mut mass = 0.0;
            for i in 0..=steps {
                let x = a + i as f64 * dx;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                mass += w * kernel.eval(x);
            }
            mass *= dx;
            assert!((mass - 1.0).abs() < 1e-8, "{kernel:?} mass {mass}");
        }
    }

    #[test]
    fn bad_bandwidth_and_grid_rejected() {
        assert!(Kernel::Epanechnikov.scaled(0.0, 1.0) > 0.0);
        let grid = default_grid(0.2, 1.5, 200);
        assert_eq!(grid.len(), 200);
        assert!(grid.first().unwrap() >= &0.2);
        assert!(grid.last().unwrap() <= &1.3000001);
    }

    #[test]
    fn kernel_parses_from_str() {
        assert_eq!("epanechnikov".parse::<Kernel>().unwrap(), Kernel::Epanechnikov);
        assert_eq!("Gaussian".parse::<Kernel>().unwrap(), Kernel::Gaussian);
        assert!("box".parse::<Kernel>().is_err());
    }
}
