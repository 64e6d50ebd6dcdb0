//! Center-side request handling and the two transports that carry it:
//! direct in-process calls, and length-prefixed frames over a byte stream
//! served by a per-center worker thread. Both paths execute the same
//! handler, so results are bit-identical across transports.

use super::wire::{
    decode_message, encode_message, read_frame, Message, HAZARD_MODE_BINNED, HAZARD_MODE_PAIRS,
    OMEGA_MODE_LOADING, OMEGA_MODE_SCORE,
};
use crate::error::{Error, Result};
use crate::lasso::{fit_l1_quadratic, SolverOptions};
use crate::survival::SurvivalDataset;
use ndarray::{Array1, Array2};
use std::io::{Read, Write};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

/// Error codes carried by wire-level error replies.
pub const ERR_BAD_REQUEST: u32 = 2;
pub const ERR_SOLVER: u32 = 3;

/// One center: an immutable local dataset plus the solver configuration
/// used for the L1-quadratic programs it is asked to run.
#[derive(Clone)]
pub struct CenterNode {
    data: Arc<SurvivalDataset>,
    opts: SolverOptions,
}

impl CenterNode {
    pub fn new(data: Arc<SurvivalDataset>, opts: SolverOptions) -> Self {
        Self { data, opts }
    }

    pub fn data(&self) -> &Arc<SurvivalDataset> {
        &self.data
    }

    /// Serve one request. Failures come back as wire-level error messages
    /// rather than panics so a remote coordinator sees them too.
    pub fn handle(&self, msg: &Message) -> Message {
        match self.try_handle(msg) {
            Ok(reply) => reply,
            Err(e) => Message::Error {
                round: msg.round(),
                code: match e {
                    Error::NonConvergence { .. } | Error::UnboundedDirection { .. } => ERR_SOLVER,
                    _ => ERR_BAD_REQUEST,
                },
                message: e.to_string(),
            },
        }
    }

    fn try_handle(&self, msg: &Message) -> Result<Message> {
        match msg {
            Message::GradRequest { round, betas } => {
                let mut grads = Vec::with_capacity(betas.len());
                for b in betas {
                    let beta = Array1::from_vec(b.clone());
                    grads.push(self.data.gradient(beta.view())?.to_vec());
                }
                Ok(Message::GradReply { round: *round, grads })
            }
            Message::OmegaRequest {
                round,
                mode,
                nu,
                lambda,
                beta_hat,
                beta_tilde,
                grad_avg_tilde,
                loading,
            } => {
                let beta_hat = Array1::from_vec(beta_hat.clone());
                let hess = self.data.hessian(beta_hat.view())?;
                match *mode {
                    OMEGA_MODE_LOADING => self.solve_loading(
                        *round,
                        &hess,
                        &beta_hat,
                        beta_tilde,
                        grad_avg_tilde,
                        loading,
                        *lambda,
                    ),
                    OMEGA_MODE_SCORE => self.solve_score(
                        *round,
                        &hess,
                        &beta_hat,
                        beta_tilde,
                        grad_avg_tilde,
                        *nu as usize,
                        *lambda,
                    ),
                    other => Err(Error::invalid(format!("unknown omega mode {other}"))),
                }
            }
            Message::HazardRequest { round, mode, beta, bins } => {
                let beta = Array1::from_vec(beta.clone());
                let (times, increments) = self.breslow_increments(beta.view())?;
                match *mode {
                    HAZARD_MODE_PAIRS => {
                        Ok(Message::HazardReply { round: *round, times, increments })
                    }
                    HAZARD_MODE_BINNED => {
                        if bins.len() < 2 {
                            return Err(Error::invalid("binned mode needs at least two edges"));
                        }
                        let mut sums = vec![0.0; bins.len() - 1];
                        for (t, inc) in times.iter().zip(&increments) {
                            // right-open bins [e_i, e_{i+1})
                            if *t < bins[0] || *t >= bins[bins.len() - 1] {
                                continue;
                            }
                            let idx = bins.partition_point(|e| *e <= *t) - 1;
                            sums[idx] += inc;
                        }
                        Ok(Message::ScalarReply { round: *round, values: sums })
                    }
                    other => Err(Error::invalid(format!("unknown hazard mode {other}"))),
                }
            }
            other => Err(Error::invalid(format!(
                "center cannot serve message type {}",
                other.msg_type()
            ))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_loading(
        &self,
        round: u32,
        hess: &Array2<f64>,
        beta_hat: &Array1<f64>,
        beta_tilde: &[f64],
        grad_avg_tilde: &[f64],
        loading: &[f64],
        lambda: f64,
    ) -> Result<Message> {
        let c = Array1::from_vec(loading.to_vec());
        let fit = fit_l1_quadratic(hess, c.view(), lambda, &self.opts)?;
        let omega = fit.beta;
        let c_dot = c.dot(&omega);
        let quad = omega.dot(&hess.dot(&omega));
        // debias correction scalar: omega' { grad(beta_tilde) - grad(beta_hat) - grad_avg_tilde }
        let bt = Array1::from_vec(beta_tilde.to_vec());
        let g_tilde = self.data.gradient(bt.view())?;
        let g_hat = self.data.gradient(beta_hat.view())?;
        let avg = Array1::from_vec(grad_avg_tilde.to_vec());
        let u = omega.dot(&(&g_tilde - &g_hat - &avg));
        Ok(Message::OmegaReply {
            round,
            omega: omega.to_vec(),
            scalars: vec![c_dot, quad, u, fit.diagnostics.kkt_residual],
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn solve_score(
        &self,
        round: u32,
        hess: &Array2<f64>,
        beta_hat: &Array1<f64>,
        beta_tilde: &[f64],
        grad_avg_tilde: &[f64],
        nu: usize,
        lambda: f64,
    ) -> Result<Message> {
        let p = beta_hat.len();
        if p < 2 || nu >= p {
            return Err(Error::invalid("score program needs p >= 2 and a valid coordinate"));
        }
        // Nuisance blocks of the Hessian at beta_hat.
        let keep: Vec<usize> = (0..p).filter(|&j| j != nu).collect();
        let mut h_gg = Array2::zeros((p - 1, p - 1));
        let mut h_gn = Array1::zeros(p - 1);
        for (a, &ja) in keep.iter().enumerate() {
            h_gn[a] = hess[(ja, nu)];
            for (b, &jb) in keep.iter().enumerate() {
                h_gg[(a, b)] = hess[(ja, jb)];
            }
        }
        let fit = fit_l1_quadratic(&h_gg, h_gn.view(), lambda, &self.opts)?;
        let w = fit.beta;

        // GEL-shifted local gradient at (0, gamma_hat).
        let mut beta0 = beta_hat.clone();
        beta0[nu] = 0.0;
        let bt = Array1::from_vec(beta_tilde.to_vec());
        let shift = &self.data.gradient(bt.view())? - &Array1::from_vec(grad_avg_tilde.to_vec());
        let g0 = &self.data.gradient(beta0.view())? - &shift;
        let mut pi = g0[nu];
        for (a, &ja) in keep.iter().enumerate() {
            pi -= w[a] * g0[ja];
        }

        let hnn = hess[(nu, nu)];
        let hgn_w = h_gn.dot(&w);
        let w_hgg_w = w.dot(&h_gg.dot(&w));
        Ok(Message::OmegaReply {
            round,
            omega: w.to_vec(),
            scalars: vec![pi, hnn, hgn_w, w_hgg_w, fit.diagnostics.kkt_residual],
        })
    }

    /// Local Breslow increments: for each local event time `s`,
    /// `1 / sum_{i in center} Y_i(s) exp(x_i' beta)`, in ascending time
    /// order. Ships only event times and scalars, never covariates.
    fn breslow_increments(&self, beta: ndarray::ArrayView1<'_, f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = &self.data;
        if beta.len() != d.p() {
            return Err(Error::invalid("beta has wrong length"));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::invalid("beta must be finite"));
        }
        let n = d.n();
        let eta: Vec<f64> = (0..n).map(|i| d.covariate_row(i).dot(&beta)).collect();
        // ascending sweep with a suffix structure: denominator at time s
        // sums subjects with Z_i >= s.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d.times()[a].partial_cmp(&d.times()[b]).unwrap());
        let emax = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // suffix sums of exp(eta - emax) in ascending-time order
        let mut suffix = vec![0.0f64; n + 1];
        for i in (0..n).rev() {
            suffix[i] = suffix[i + 1] + (eta[order[i]] - emax).exp();
        }
        let mut times = Vec::new();
        let mut incs = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if d.events()[i] {
                let denom = suffix[rank] * emax.exp();
                // the event subject itself is at risk at its own time
                debug_assert!(denom > 0.0);
                times.push(d.times()[i]);
                incs.push(1.0 / denom);
            }
        }
        Ok((times, incs))
    }
}

/// Request/reply channel to one center.
pub trait CenterChannel: Send {
    fn exchange(&mut self, request: &Message) -> Result<Message>;
}

/// Zero-copy transport: the handler runs on the calling thread.
pub struct InProcessChannel {
    node: CenterNode,
}

impl InProcessChannel {
    pub fn new(node: CenterNode) -> Self {
        Self { node }
    }
}

impl CenterChannel for InProcessChannel {
    fn exchange(&mut self, request: &Message) -> Result<Message> {
        Ok(self.node.handle(request))
    }
}

// ---------------------------------------------------------------------------
// Byte-stream transport
// ---------------------------------------------------------------------------

/// Blocking in-memory byte pipe with a receive timeout, used to connect
/// the coordinator to center worker threads. Any `Read + Write` pair
/// (for example a TCP socket) would serve equally.
pub struct PipeReader {
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
    pos: usize,
    timeout: Duration,
}

pub struct PipeWriter {
    tx: Sender<Vec<u8>>,
}

pub fn pipe(timeout: Duration) -> (PipeWriter, PipeReader) {
    let (tx, rx) = mpsc::channel();
    (PipeWriter { tx }, PipeReader { rx, buf: Vec::new(), pos: 0, timeout })
}

impl Read for PipeReader {
    fn read(&mut self, out: &mut [u8]) -> std::io::Result<usize> {
        if self.pos >= self.buf.len() {
            match self.rx.recv_timeout(self.timeout) {
                Ok(chunk) => {
                    self.buf = chunk;
                    self.pos = 0;
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::TimedOut,
                        "round timed out",
                    ));
                }
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = out.len().min(self.buf.len() - self.pos);
        out[..n].copy_from_slice(&self.buf[self.pos..self.pos + n]);
        self.pos += n;
        Ok(n)
    }
}

impl Write for PipeWriter {
    fn write(&mut self, data: &[u8]) -> std::io::Result<usize> {
        self.tx
            .send(data.to_vec())
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::BrokenPipe, "pipe closed"))?;
        Ok(data.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Coordinator end of a framed byte stream.
pub struct StreamChannel {
    writer: Box<dyn Write + Send>,
    reader: Box<dyn Read + Send>,
}

impl StreamChannel {
    pub fn new(writer: Box<dyn Write + Send>, reader: Box<dyn Read + Send>) -> Self {
        Self { writer, reader }
    }
}

impl CenterChannel for StreamChannel {
    fn exchange(&mut self, request: &Message) -> Result<Message> {
        let frame = encode_message(request);
        self.writer.write_all(&frame)?;
        self.writer.flush()?;
        let reply_frame = read_frame(&mut self.reader)?;
        decode_message(&reply_frame)
    }
}

/// Spawn a worker thread serving one center over framed pipes; returns the
/// coordinator-side channel and the join handle.
pub fn spawn_stream_center(
    node: CenterNode,
    timeout: Duration,
) -> (StreamChannel, std::thread::JoinHandle<()>) {
    let (coord_tx, center_rx) = pipe(timeout);
    let (center_tx, coord_rx) = pipe(timeout);
    let handle = std::thread::spawn(move || {
        let mut rx = center_rx;
        let mut tx = center_tx;
        loop {
            let frame = match read_frame(&mut rx) {
                Ok(f) => f,
                Err(_) => break, // coordinator hung up
            };
            let reply = match decode_message(&frame) {
                Ok(request) => node.handle(&request),
                Err(e) => Message::Error { round: 0, code: ERR_BAD_REQUEST, message: e.to_string() },
            };
            if tx.write_all(&encode_message(&reply)).is_err() {
                break;
            }
        }
    });
    (StreamChannel::new(Box::new(coord_tx), Box::new(coord_rx)), handle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn center() -> CenterNode {
        let d = SurvivalDataset::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![true, true, false, true],
            array![[0.5, -0.5], [1.0, 0.0], [-1.0, 0.25], [0.0, 1.0]],
        )
        .unwrap();
        CenterNode::new(Arc::new(d), SolverOptions::default())
    }

    #[test]
    fn gradient_request_matches_direct_call() {
        let node = center();
        let beta = array![0.3, -0.1];
        let want = node.data().gradient(beta.view()).unwrap();
        let reply = node.handle(&Message::GradRequest { round: 5, betas: vec![beta.to_vec()] });
        match reply {
            Message::GradReply { round, grads } => {
                assert_eq!(round, 5);
                assert_eq!(grads[0], want.to_vec());
            }
            other => panic!("unexpected reply {other:?}"),
        }
    }

    #[test]
    fn stream_and_inprocess_agree_bit_for_bit() {
        let node = center();
        let mut inproc = InProcessChannel::new(node.clone());
        let (mut stream, handle) = spawn_stream_center(node, Duration::from_secs(5));
        let req = Message::GradRequest { round: 1, betas: vec![vec![0.1, 0.7], vec![-0.3, 0.0]] };
        let a = inproc.exchange(&req).unwrap();
        let b = stream.exchange(&req).unwrap();
        assert_eq!(a, b);
        drop(stream);
        handle.join().unwrap();
    }

    #[test]
    fn malformed_request_yields_error_reply() {
        let node = center();
        // a reply type sent as a request is refused
        let reply =
            node.handle(&Message::ScalarReply { round: 2, values: vec![] });
        assert!(matches!(reply, Message::Error { code: ERR_BAD_REQUEST, .. }));
    }

    #[test]
    fn timeout_fires_on_silent_peer() {
        let (_tx, rx) = pipe(Duration::from_millis(20));
        let mut chan = StreamChannel::new(
            Box::new(std::io::sink()),
            Box::new(rx),
        );
        let req = Message::GradRequest { round: 0, betas: vec![] };
        let start = std::time::Instant::now();
        let err = chan.exchange(&req).unwrap_err();
        assert!(start.elapsed() < Duration::from_secs(2));
        assert!(err.to_string().contains("timed out") || err.to_string().contains("i/o"));
    }
}
