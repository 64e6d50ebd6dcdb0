//! K-center topology: partitioning, the coordinator/center round protocol,
//! distributed gradient aggregation, the iterative gradient-enhanced-loss
//! driver, and communication accounting.
//!
//! The coordinator is the principal center: it owns center 1's data (the
//! penalized solves run there) while every gradient/solve/hazard round goes
//! through the per-center channel, so the communication ledger counts all
//! `K` centers uniformly: one `p`-float broadcast down and `K * p` floats
//! up per gradient round.

pub mod transport;
pub mod wire;

use crate::error::{Error, Result};
use crate::lasso::{fit_l1_cox, fit_l1_quadratic, GelCorrection, LassoFit, SolverOptions};
use crate::stats::rng_for;
use crate::survival::SurvivalDataset;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;
use transport::{spawn_stream_center, CenterChannel, CenterNode, InProcessChannel};
use wire::Message;

/// Which carrier moves frames between coordinator and centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    Stream,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Down,
    Up,
}

/// One logged exchange leg: message type, direction, f64 payload count.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CommEvent {
    pub msg_type: u8,
    #[serde(serialize_with = "ser_direction")]
    pub direction: u8,
    pub floats: usize,
}

fn ser_direction<S: serde::Serializer>(d: &u8, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(if *d == 0 { "down" } else { "up" })
}

/// Running tally of protocol traffic. Broadcasts are counted once; replies
/// once per center.
#[derive(Debug, Default, Clone)]
pub struct CommLog {
    pub events: Vec<CommEvent>,
    pub messages_down: usize,
    pub messages_up: usize,
    pub floats_down: usize,
    pub floats_up: usize,
}

impl CommLog {
    fn log(&mut self, msg: &Message, direction: Direction) {
        let floats = msg.float_count();
        self.events.push(CommEvent {
            msg_type: msg.msg_type(),
            direction: if direction == Direction::Down { 0 } else { 1 },
            floats,
        });
        match direction {
            Direction::Down => {
                self.messages_down += 1;
                self.floats_down += floats;
            }
            Direction::Up => {
                self.messages_up += 1;
                self.floats_up += floats;
            }
        }
    }

    pub fn max_floats_in_message(&self) -> usize {
        self.events.iter().map(|e| e.floats).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CommSummary {
    pub messages_down: usize,
    pub messages_up: usize,
    pub floats_down: usize,
    pub floats_up: usize,
}

/// `K` centers behind one protocol, plus the principal center's dataset
/// handle for the coordinator-side penalized solves.
pub struct FederatedCohort {
    datasets: Vec<Arc<SurvivalDataset>>,
    channels: Vec<Mutex<Box<dyn CenterChannel>>>,
    workers: Vec<std::thread::JoinHandle<()>>,
    assignment: Vec<Vec<usize>>,
    comm: Mutex<CommLog>,
    round: AtomicU32,
    transport: TransportKind,
}

impl FederatedCohort {
    /// Seeded uniform partition of `data` into `K` equal centers.
    pub fn partition(data: &SurvivalDataset, k: usize, seed: u64) -> Result<Self> {
        Self::partition_with(data, k, seed, TransportKind::InProcess, SolverOptions::default())
    }

    pub fn partition_with(
        data: &SurvivalDataset,
        k: usize,
        seed: u64,
        transport: TransportKind,
        center_opts: SolverOptions,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        let n = data.n();
        if n % k != 0 {
            return Err(Error::invalid(format!(
                "K = {k} does not divide n = {n} (remainder {})",
                n % k
            )));
        }
        let m = n / k;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(seed, 0x7061_7274));
        let mut assignment = Vec::with_capacity(k);
        let mut datasets = Vec::with_capacity(k);
        for block in order.chunks(m) {
            let mut idx = block.to_vec();
            idx.sort_unstable();
            datasets.push(Arc::new(data.subset(&idx)?));
            assignment.push(idx);
        }
        Self::from_center_datasets(datasets, assignment, transport, center_opts)
    }

    /// Assemble a cohort from per-center datasets (sizes must match).
    pub fn from_center_datasets(
        datasets: Vec<Arc<SurvivalDataset>>,
        assignment: Vec<Vec<usize>>,
        transport: TransportKind,
        center_opts: SolverOptions,
    ) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::invalid("cohort needs at least one center"));
        }
        let m = datasets[0].n();
        let p = datasets[0].p();
        for (k, d) in datasets.iter().enumerate() {
            if d.n() != m {
                return Err(Error::invalid(format!(
                    "center {k} has {} subjects, expected {m}: equal center sizes are required",
                    d.n()
                )));
            }
            if d.p() != p {
                return Err(Error::invalid("centers disagree on covariate dimension"));
            }
        }
        let mut channels: Vec<Mutex<Box<dyn CenterChannel>>> = Vec::with_capacity(datasets.len());
        let mut workers = Vec::new();
        for d in &datasets {
            let node = CenterNode::new(Arc::clone(d), center_opts);
            match transport {
                TransportKind::InProcess => {
                    channels.push(Mutex::new(Box::new(InProcessChannel::new(node))));
                }
                TransportKind::Stream => {
                    let (chan, handle) = spawn_stream_center(node, Duration::from_secs(60));
                    channels.push(Mutex::new(Box::new(chan)));
                    workers.push(handle);
                }
            }
        }
        Ok(Self {
            datasets,
            channels,
            workers,
            assignment,
            comm: Mutex::new(CommLog::default()),
            round: AtomicU32::new(0),
            transport,
        })
    }

    pub fn k(&self) -> usize {
        self.datasets.len()
    }

    pub fn m(&self) -> usize {
        self.datasets[0].n()
    }

    pub fn n(&self) -> usize {
        self.m() * self.k()
    }

    pub fn p(&self) -> usize {
        self.datasets[0].p()
    }

    /// Index of the principal center.
    pub fn principal(&self) -> usize {
        0
    }

    pub fn transport(&self) -> TransportKind {
        self.transport
    }

    /// The principal center's dataset (coordinator-side solves run here).
    pub fn principal_data(&self) -> &Arc<SurvivalDataset> {
        &self.datasets[0]
    }

    /// Center datasets; subject-level rows never cross the protocol, this
    /// accessor exists for co-located baselines and experiment harnesses.
    pub fn center_data(&self, k: usize) -> &Arc<SurvivalDataset> {
        &self.datasets[k]
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }

    pub fn comm_summary(&self) -> CommSummary {
        let log = self.comm.lock().unwrap();
        CommSummary {
            messages_down: log.messages_down,
            messages_up: log.messages_up,
            floats_down: log.floats_down,
            floats_up: log.floats_up,
        }
    }

    pub fn comm_log(&self) -> CommLog {
        self.comm.lock().unwrap().clone()
    }

    pub fn reset_comm(&self) {
        *self.comm.lock().unwrap() = CommLog::default();
    }

    fn next_round(&self) -> u32 {
        self.round.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Broadcast one request to every center and gather the replies in
    /// center order. The broadcast is logged once; each reply separately.
    /// Centers evaluate concurrently; the reduce is ordered.
    fn broadcast(&self, request: &Message) -> Result<Vec<Message>> {
        self.comm.lock().unwrap().log(request, Direction::Down);
        let replies: Vec<(usize, Result<Message>)> = self
            .channels
            .par_iter()
            .enumerate()
            .map(|(k, chan)| {
                let mut chan = chan.lock().unwrap();
                (k, chan.exchange(request))
            })
            .collect();
        let mut ordered: Vec<Option<Message>> = (0..self.k()).map(|_| None).collect();
        for (k, reply) in replies {
            let msg = reply.map_err(|e| Error::Transport { center: k, message: e.to_string() })?;
            if let Message::Error { message, .. } = &msg {
                return Err(Error::Transport { center: k, message: message.clone() });
            }
            if msg.round() != request.round() {
                return Err(Error::Transport {
                    center: k,
                    message: format!(
                        "round mismatch: reply {} to request {}",
                        msg.round(),
                        request.round()
                    ),
                });
            }
            self.comm.lock().unwrap().log(&msg, Direction::Up);
            ordered[k] = Some(msg);
        }
        Ok(ordered.into_iter().map(Option::unwrap).collect())
    }

    /// One gradient round: every center evaluates its local gradient at
    /// each of the broadcast betas. Returns `[center][beta]` gradients.
    pub fn gradient_round(&self, betas: &[Array1<f64>]) -> Result<Vec<Vec<Array1<f64>>>> {
        let round = self.next_round();
        let request = Message::GradRequest {
            round,
            betas: betas.iter().map(|b| b.to_vec()).collect(),
        };
        let replies = self.broadcast(&request)?;
        let mut out = Vec::with_capacity(self.k());
        for (k, reply) in replies.into_iter().enumerate() {
            match reply {
                Message::GradReply { grads, .. } => {
                    if grads.len() != betas.len() {
                        return Err(Error::Transport {
                            center: k,
                            message: "gradient count mismatch".into(),
                        });
                    }
                    out.push(grads.into_iter().map(Array1::from_vec).collect());
                }
                other => {
                    return Err(Error::Transport {
                        center: k,
                        message: format!("unexpected reply type {}", other.msg_type()),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Distributed gradient: the average `(1/K) sum_k grad_k(beta)` of the
    /// per-center partial-likelihood gradients (local risk sets only).
    pub fn aggregate_gradient(&self, beta: &Array1<f64>) -> Result<Array1<f64>> {
        let per_center = self.gradient_round(std::slice::from_ref(beta))?;
        Ok(average_first(&per_center))
    }

    /// Omega/score-program round; see the wire schema for payloads.
    pub(crate) fn omega_round(
        &self,
        mode: u32,
        nu: u32,
        lambda: f64,
        beta_hat: &Array1<f64>,
        beta_tilde: &Array1<f64>,
        grad_avg_tilde: &Array1<f64>,
        loading: &[f64],
    ) -> Result<Vec<(Array1<f64>, Vec<f64>)>> {
        let round = self.next_round();
        let request = Message::OmegaRequest {
            round,
            mode,
            nu,
            lambda,
            beta_hat: beta_hat.to_vec(),
            beta_tilde: beta_tilde.to_vec(),
            grad_avg_tilde: grad_avg_tilde.to_vec(),
            loading: loading.to_vec(),
        };
        let replies = self.broadcast(&request)?;
        let mut out = Vec::with_capacity(self.k());
        for (k, reply) in replies.into_iter().enumerate() {
            match reply {
                Message::OmegaReply { omega, scalars, .. } => {
                    out.push((Array1::from_vec(omega), scalars));
                }
                other => {
                    return Err(Error::Transport {
                        center: k,
                        message: format!("unexpected reply type {}", other.msg_type()),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Hazard round in pairs mode: per-center (event time, increment)
    /// lists.
    pub(crate) fn hazard_round(&self, beta: &Array1<f64>) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let round = self.next_round();
        let request = Message::HazardRequest {
            round,
            mode: wire::HAZARD_MODE_PAIRS,
            beta: beta.to_vec(),
            bins: vec![],
        };
        let replies = self.broadcast(&request)?;
        let mut out = Vec::with_capacity(self.k());
        for (k, reply) in replies.into_iter().enumerate() {
            match reply {
                Message::HazardReply { times, increments, .. } => out.push((times, increments)),
                other => {
                    return Err(Error::Transport {
                        center: k,
                        message: format!("unexpected reply type {}", other.msg_type()),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Hazard round in binned mode: per-center per-bin increment sums.
    pub(crate) fn hazard_round_binned(
        &self,
        beta: &Array1<f64>,
        edges: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let round = self.next_round();
        let request = Message::HazardRequest {
            round,
            mode: wire::HAZARD_MODE_BINNED,
            beta: beta.to_vec(),
            bins: edges.to_vec(),
        };
        let replies = self.broadcast(&request)?;
        let mut out = Vec::with_capacity(self.k());
        for (k, reply) in replies.into_iter().enumerate() {
            match reply {
                Message::ScalarReply { values, .. } => out.push(values),
                other => {
                    return Err(Error::Transport {
                        center: k,
                        message: format!("unexpected reply type {}", other.msg_type()),
                    })
                }
            }
        }
        Ok(out)
    }
}

impl Drop for FederatedCohort {
    fn drop(&mut self) {
        // Dropping the channels closes the pipes; workers observe EOF.
        self.channels.clear();
        for handle in self.workers.drain(..) {
            let _ = handle.join();
        }
    }
}

fn average_first(per_center: &[Vec<Array1<f64>>]) -> Array1<f64> {
    let k = per_center.len();
    let mut sum = per_center[0][0].clone();
    for grads in per_center.iter().skip(1) {
        sum += &grads[0];
    }
    sum / k as f64
}

// ---------------------------------------------------------------------------
// The iterative estimator
// ---------------------------------------------------------------------------

/// Regularization schedule over rounds (`t >= 1`).
#[derive(Debug, Clone, Copy)]
pub enum LambdaSchedule {
    Constant(f64),
    /// `initial * ratio^(t-1)`, floored.
    Geometric { initial: f64, ratio: f64, floor: f64 },
}

impl LambdaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LambdaSchedule::Constant(l) => l,
            LambdaSchedule::Geometric { initial, ratio, floor } => {
                (initial * ratio.powi(t.saturating_sub(1) as i32)).max(floor)
            }
        }
    }
}

/// Initialization of the iteration.
#[derive(Debug, Clone)]
pub enum GelInit {
    /// L1-regularized fit on the principal center at the given penalty.
    LocalLasso { lambda0: f64 },
    Provided(Array1<f64>),
}

/// Iterates, per-round penalties, per-round solver certificates, and the
/// upstream float count of each gradient round.
#[derive(Debug, Clone, PartialEq)]
pub struct GelTrace {
    pub iterates: Vec<Array1<f64>>,
    pub lambdas: Vec<f64>,
    pub kkt: Vec<f64>,
    pub comm_upstream_per_round: Vec<usize>,
    /// Set when a round's solve failed; the trace is truncated there.
    pub failure: Option<(usize, String)>,
}

impl GelTrace {
    pub fn last(&self) -> &Array1<f64> {
        self.iterates.last().expect("trace holds at least beta_0")
    }

    /// `(beta_tilde, beta_hat) = (beta_{T-1}, beta_T)`: the last two
    /// iterates, which the debiasing construction consumes.
    pub fn inference_pair(&self) -> Result<(&Array1<f64>, &Array1<f64>)> {
        if self.iterates.len() < 2 {
            return Err(Error::invalid("need at least one iteration beyond beta_0"));
        }
        Ok((&self.iterates[self.iterates.len() - 2], &self.iterates[self.iterates.len() - 1]))
    }
}

/// Iteration count sufficient to reach the full-sample rate:
/// `ceil(log K / (2 log(1/a0)))` for a contraction factor `a0 < 1`.
pub fn default_rounds(k: usize, a0: f64) -> usize {
    assert!(a0 > 0.0 && a0 < 1.0);
    if k <= 1 {
        return 0;
    }
    ((k as f64).ln() / (2.0 * (1.0 / a0).ln())).ceil() as usize
}

/// Run `rounds` iterations of the gradient-enhanced-loss scheme.
///
/// Each round broadcasts the current iterate, averages the per-center
/// gradients, assembles the gradient correction at the principal center,
/// and re-solves the corrected L1 problem warm-started from the previous
/// iterate.
pub fn gel_iterate(
    cohort: &FederatedCohort,
    rounds: usize,
    schedule: &LambdaSchedule,
    init: &GelInit,
    opts: &SolverOptions,
) -> Result<GelTrace> {
    let p = cohort.p();
    let principal = cohort.principal_data();
    let mut trace = GelTrace {
        iterates: Vec::with_capacity(rounds + 1),
        lambdas: Vec::with_capacity(rounds + 1),
        kkt: Vec::with_capacity(rounds + 1),
        comm_upstream_per_round: Vec::with_capacity(rounds),
        failure: None,
    };

    let beta0 = match init {
        GelInit::LocalLasso { lambda0 } => {
            let fit = fit_l1_cox(principal, *lambda0, None, Array1::zeros(p).view(), opts)?;
            trace.lambdas.push(*lambda0);
            trace.kkt.push(fit.diagnostics.kkt_residual);
            fit.beta
        }
        GelInit::Provided(b) => {
            if b.len() != p {
                return Err(Error::invalid("provided init has wrong length"));
            }
            trace.lambdas.push(f64::NAN);
            trace.kkt.push(f64::NAN);
            b.clone()
        }
    };
    trace.iterates.push(beta0);

    for t in 0..rounds {
        let beta_t = trace.iterates[t].clone();
        let before = cohort.comm_summary().floats_up;
        let per_center = cohort.gradient_round(std::slice::from_ref(&beta_t))?;
        trace.comm_upstream_per_round.push(cohort.comm_summary().floats_up - before);
        let grad_avg = average_first(&per_center);
        let shift = &per_center[cohort.principal()][0] - &grad_avg;
        let lambda = schedule.at(t + 1);
        match fit_l1_cox(
            principal,
            lambda,
            Some(&GelCorrection { shift, anchor: beta_t.clone() }),
            beta_t.view(),
            opts,
        ) {
            Ok(fit) => {
                trace.iterates.push(fit.beta);
                trace.lambdas.push(lambda);
                trace.kkt.push(fit.diagnostics.kkt_residual);
            }
            Err(e) => {
                trace.failure = Some((t, e.to_string()));
                return Ok(trace);
            }
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Reference estimators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// L1 fit on the principal center only.
    OneCenter,
    /// Plain average of the per-center L1 fits.
    Average,
    /// Average of per-center debiased fits, with the nodewise directions
    /// from the L1-quadratic program on each local Hessian.
    AverageDebiased,
}

pub fn baseline_estimator(
    cohort: &FederatedCohort,
    which: Baseline,
    lambda: f64,
    lambda_nodewise: f64,
    opts: &SolverOptions,
) -> Result<Array1<f64>> {
    let p = cohort.p();
    match which {
        Baseline::OneCenter => {
            let fit = fit_l1_cox(cohort.principal_data(), lambda, None, Array1::zeros(p).view(), opts)?;
            Ok(fit.beta)
        }
        Baseline::Average => {
            let fits: Vec<Result<LassoFit>> = (0..cohort.k())
                .into_par_iter()
                .map(|k| fit_l1_cox(cohort.center_data(k), lambda, None, Array1::zeros(p).view(), opts))
                .collect();
            let mut sum = Array1::zeros(p);
            for fit in fits {
                sum += &fit?.beta;
            }
            Ok(sum / cohort.k() as f64)
        }
        Baseline::AverageDebiased => {
            let debiased: Vec<Result<Array1<f64>>> = (0..cohort.k())
                .into_par_iter()
                .map(|k| {
                    let data = cohort.center_data(k);
                    let fit = fit_l1_cox(data, lambda, None, Array1::zeros(p).view(), opts)?;
                    let hess = data.hessian(fit.beta.view())?;
                    let grad = data.gradient(fit.beta.view())?;
                    let mut corrected = fit.beta.clone();
                    let mut e = Array1::<f64>::zeros(p);
                    for j in 0..p {
                        e.fill(0.0);
                        e[j] = 1.0;
                        let node = fit_l1_quadratic(&hess, e.view(), lambda_nodewise, opts)?;
                        corrected[j] -= node.beta.dot(&grad);
                    }
                    Ok(corrected)
                })
                .collect();
            let mut sum = Array1::zeros(p);
            for b in debiased {
                sum += &b?;
            }
            Ok(sum / cohort.k() as f64)
        }
    }
}

/// Full-sample L1 benchmark on pooled data (not a distributed quantity;
/// used for comparisons).
pub fn full_sample_lasso(
    data: &SurvivalDataset,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Array1<f64>> {
    let fit = fit_l1_cox(data, lambda, None, Array1::zeros(data.p()).view(), opts)?;
    Ok(fit.beta)
}

/// Local Hessian of one center at `beta` (used by co-located inference
/// reductions and tests).
pub fn center_hessian(cohort: &FederatedCohort, k: usize, beta: &Array1<f64>) -> Result<Array2<f64>> {
    cohort.center_data(k).hessian(beta.view())
}
