//! Binary wire format for coordinator/center exchanges.
//!
//! Frame layout: `[u32 LE length][u8 version = 1][u8 msg_type][payload]`,
//! where `length` counts the version byte, the type byte, and the payload.
//! Numeric payload fields are little-endian: `u32` for counts and ids,
//! `f64` arrays preceded by a `u32` dimension. Floats survive the wire
//! bit-exactly.

use crate::error::{Error, Result};

pub const WIRE_VERSION: u8 = 1;
/// Frames larger than this are rejected outright.
pub const MAX_FRAME_BYTES: u32 = 1 << 28;

pub const MSG_GRAD_REQUEST: u8 = 1;
pub const MSG_GRAD_REPLY: u8 = 2;
pub const MSG_OMEGA_REQUEST: u8 = 3;
pub const MSG_OMEGA_REPLY: u8 = 4;
pub const MSG_SCALAR_REPLY: u8 = 5;
pub const MSG_HAZARD_REQUEST: u8 = 6;
pub const MSG_HAZARD_REPLY: u8 = 7;
pub const MSG_ERROR: u8 = 8;

/// Which L1-quadratic program an omega request asks the center to solve.
pub const OMEGA_MODE_LOADING: u32 = 0;
pub const OMEGA_MODE_SCORE: u32 = 1;

/// Hazard payload shapes: exact per-event pairs, or pre-binned sums.
pub const HAZARD_MODE_PAIRS: u32 = 0;
pub const HAZARD_MODE_BINNED: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Coordinator -> center: evaluate the local gradient at each beta.
    GradRequest { round: u32, betas: Vec<Vec<f64>> },
    /// Center -> coordinator: one gradient per requested beta.
    GradReply { round: u32, grads: Vec<Vec<f64>> },
    /// Coordinator -> center: solve an L1 quadratic program on the local
    /// Hessian at `beta_hat` and evaluate the attached debias/score
    /// functionals. `loading` is empty in score mode; `nu` is unused in
    /// loading mode.
    OmegaRequest {
        round: u32,
        mode: u32,
        nu: u32,
        lambda: f64,
        beta_hat: Vec<f64>,
        beta_tilde: Vec<f64>,
        grad_avg_tilde: Vec<f64>,
        loading: Vec<f64>,
    },
    /// Center -> coordinator: program solution plus the functional scalars.
    OmegaReply { round: u32, omega: Vec<f64>, scalars: Vec<f64> },
    /// Center -> coordinator: scalar-only payload (binned hazard mode).
    ScalarReply { round: u32, values: Vec<f64> },
    /// Coordinator -> center: local Breslow increments at `beta`;
    /// `bins` holds grid edges in binned mode, otherwise empty.
    HazardRequest { round: u32, mode: u32, beta: Vec<f64>, bins: Vec<f64> },
    /// Center -> coordinator: (event time, increment) pairs.
    HazardReply { round: u32, times: Vec<f64>, increments: Vec<f64> },
    /// Center -> coordinator: request failed.
    Error { round: u32, code: u32, message: String },
}

impl Message {
    pub fn msg_type(&self) -> u8 {
        match self {
            Message::GradRequest { .. } => MSG_GRAD_REQUEST,
            Message::GradReply { .. } => MSG_GRAD_REPLY,
            Message::OmegaRequest { .. } => MSG_OMEGA_REQUEST,
            Message::OmegaReply { .. } => MSG_OMEGA_REPLY,
            Message::ScalarReply { .. } => MSG_SCALAR_REPLY,
            Message::HazardRequest { .. } => MSG_HAZARD_REQUEST,
            Message::HazardReply { .. } => MSG_HAZARD_REPLY,
            Message::Error { .. } => MSG_ERROR,
        }
    }

    pub fn round(&self) -> u32 {
        match self {
            Message::GradRequest { round, .. }
            | Message::GradReply { round, .. }
            | Message::OmegaRequest { round, .. }
            | Message::OmegaReply { round, .. }
            | Message::ScalarReply { round, .. }
            | Message::HazardRequest { round, .. }
            | Message::HazardReply { round, .. }
            | Message::Error { round, .. } => *round,
        }
    }

    /// Number of f64 values in the payload; the unit of the communication
    /// ledger and the quantity bounded by the privacy contract.
    pub fn float_count(&self) -> usize {
        match self {
            Message::GradRequest { betas, .. } => betas.iter().map(Vec::len).sum(),
            Message::GradReply { grads, .. } => grads.iter().map(Vec::len).sum(),
            Message::OmegaRequest { beta_hat, beta_tilde, grad_avg_tilde, loading, .. } => {
                1 + beta_hat.len() + beta_tilde.len() + grad_avg_tilde.len() + loading.len()
            }
            Message::OmegaReply { omega, scalars, .. } => omega.len() + scalars.len(),
            Message::ScalarReply { values, .. } => values.len(),
            Message::HazardRequest { beta, bins, .. } => beta.len() + bins.len(),
            Message::HazardReply { times, increments, .. } => times.len() + increments.len(),
            Message::Error { .. } => 0,
        }
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn vec(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for x in v {
            self.f64(*x);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode(format!(
                "truncated frame: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn vec(&mut self) -> Result<Vec<f64>> {
        let dim = self.u32()? as usize;
        let mut v = Vec::with_capacity(dim.min(1 << 20));
        for _ in 0..dim {
            v.push(self.f64()?);
        }
        Ok(v)
    }
    fn str(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Decode(e.to_string()))
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Decode(format!(
                "trailing bytes: payload has {} bytes, consumed {}",
                self.buf.len(),
                self.pos
            )));
        }
        Ok(())
    }
}

/// Encode a message as a complete frame (length prefix included).
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let mut w = Writer::new();
    match msg {
        Message::GradRequest { round, betas } => {
            w.u32(*round);
            w.u32(betas.len() as u32);
            for b in betas {
                w.vec(b);
            }
        }
        Message::GradReply { round, grads } => {
            w.u32(*round);
            w.u32(grads.len() as u32);
            for g in grads {
                w.vec(g);
            }
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
            w.u32(*round);
            w.u32(*mode);
            w.u32(*nu);
            w.f64(*lambda);
            w.vec(beta_hat);
            w.vec(beta_tilde);
            w.vec(grad_avg_tilde);
            w.vec(loading);
        }
        Message::OmegaReply { round, omega, scalars } => {
            w.u32(*round);
            w.vec(omega);
            w.vec(scalars);
        }
        Message::ScalarReply { round, values } => {
            w.u32(*round);
            w.vec(values);
        }
        Message::HazardRequest { round, mode, beta, bins } => {
            w.u32(*round);
            w.u32(*mode);
            w.vec(beta);
            w.vec(bins);
        }
        Message::HazardReply { round, times, increments } => {
            w.u32(*round);
            w.vec(times);
            w.vec(increments);
        }
        Message::Error { round, code, message } => {
            w.u32(*round);
            w.u32(*code);
            w.str(message);
        }
    }
    let payload = w.buf;
    let length = (payload.len() + 2) as u32;
    let mut frame = Vec::with_capacity(4 + payload.len() + 2);
    frame.extend_from_slice(&length.to_le_bytes());
    frame.push(WIRE_VERSION);
    frame.push(msg.msg_type());
    frame.extend_from_slice(&payload);
    frame
}

/// Decode one complete frame (length prefix included).
pub fn decode_message(frame: &[u8]) -> Result<Message> {
    if frame.len() < 6 {
        return Err(Error::Decode(format!("frame too short: {} bytes", frame.len())));
    }
    let length = u32::from_le_bytes(frame[0..4].try_into().unwrap());
    if length as usize != frame.len() - 4 {
        return Err(Error::Decode(format!(
            "length prefix {} does not match body length {}",
            length,
            frame.len() - 4
        )));
    }
    let version = frame[4];
    if version != WIRE_VERSION {
        return Err(Error::Decode(format!(
            "version mismatch: got {version}, expected {WIRE_VERSION}"
        )));
    }
    let msg_type = frame[5];
    let mut r = Reader::new(&frame[6..]);
    let msg = match msg_type {
        MSG_GRAD_REQUEST => {
            let round = r.u32()?;
            let count = r.u32()? as usize;
            let mut betas = Vec::with_capacity(count);
            for _ in 0..count {
                betas.push(r.vec()?);
            }
            Message::GradRequest { round, betas }
        }
        MSG_GRAD_REPLY => {
            let round = r.u32()?;
            let count = r.u32()? as usize;
            let mut grads = Vec::with_capacity(count);
            for _ in 0..count {
                grads.push(r.vec()?);
            }
            Message::GradReply { round, grads }
        }
        MSG_OMEGA_REQUEST => {
            let round = r.u32()?;
            let mode = r.u32()?;
            let nu = r.u32()?;
            let lambda = r.f64()?;
            let beta_hat = r.vec()?;
            let beta_tilde = r.vec()?;
            let grad_avg_tilde = r.vec()?;
            let loading = r.vec()?;
            Message::OmegaRequest {
                round,
                mode,
                nu,
                lambda,
                beta_hat,
                beta_tilde,
                grad_avg_tilde,
                loading,
            }
        }
        MSG_OMEGA_REPLY => {
            let round = r.u32()?;
            let omega = r.vec()?;
            let scalars = r.vec()?;
            Message::OmegaReply { round, omega, scalars }
        }
        MSG_SCALAR_REPLY => {
            let round = r.u32()?;
            let values = r.vec()?;
            Message::ScalarReply { round, values }
        }
        MSG_HAZARD_REQUEST => {
            let round = r.u32()?;
            let mode = r.u32()?;
            let beta = r.vec()?;
            let bins = r.vec()?;
            Message::HazardRequest { round, mode, beta, bins }
        }
        MSG_HAZARD_REPLY => {
            let round = r.u32()?;
            let times = r.vec()?;
            let increments = r.vec()?;
            Message::HazardReply { round, times, increments }
        }
        MSG_ERROR => {
            let round = r.u32()?;
            let code = r.u32()?;
            let message = r.str()?;
            Message::Error { round, code, message }
        }
        other => return Err(Error::Decode(format!("unknown message type {other}"))),
    };
    r.done()?;
    Ok(msg)
}

/// Read one frame from a byte stream.
pub fn read_frame(reader: &mut impl std::io::Read) -> Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    reader.read_exact(&mut len_buf)?;
    let length = u32::from_le_bytes(len_buf);
    if length > MAX_FRAME_BYTES {
        return Err(Error::Decode(format!("frame of {length} bytes exceeds limit")));
    }
    if length < 2 {
        return Err(Error::Decode("frame shorter than header".into()));
    }
    let mut frame = vec![0u8; 4 + length as usize];
    frame[0..4].copy_from_slice(&len_buf);
    reader.read_exact(&mut frame[4..])?;
    Ok(frame)
}

/// JSON-lines mirror of the binary schema with 17-significant-digit
/// floats, for debugging wire traffic.
pub fn to_debug_json(msg: &Message) -> String {
    fn fv(v: &[f64]) -> String {
        let items: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
        format!("[{}]", items.join(","))
    }
    match msg {
        Message::GradRequest { round, betas } => {
            let bs: Vec<String> = betas.iter().map(|b| fv(b)).collect();
            format!(r#"{{"type":"grad_request","round":{round},"betas":[{}]}}"#, bs.join(","))
        }
        Message::GradReply { round, grads } => {
            let gs: Vec<String> = grads.iter().map(|g| fv(g)).collect();
            format!(r#"{{"type":"grad_reply","round":{round},"grads":[{}]}}"#, gs.join(","))
        }
        Message::OmegaRequest { round, mode, nu, lambda, beta_hat, beta_tilde, grad_avg_tilde, loading } => {
            format!(
                r#"{{"type":"omega_request","round":{round},"mode":{mode},"nu":{nu},"lambda":{lambda:.17e},"beta_hat":{},"beta_tilde":{},"grad_avg_tilde":{},"loading":{}}}"#,
                fv(beta_hat),
                fv(beta_tilde),
                fv(grad_avg_tilde),
                fv(loading)
            )
        }
        Message::OmegaReply { round, omega, scalars } => {
            format!(
                r#"{{"type":"omega_reply","round":{round},"omega":{},"scalars":{}}}"#,
                fv(omega),
                fv(scalars)
            )
        }
        Message::ScalarReply { round, values } => {
            format!(r#"{{"type":"scalar_reply","round":{round},"values":{}}}"#, fv(values))
        }
        Message::HazardRequest { round, mode, beta, bins } => {
            format!(
                r#"{{"type":"hazard_request","round":{round},"mode":{mode},"beta":{},"bins":{}}}"#,
                fv(beta),
                fv(bins)
            )
        }
        Message::HazardReply { round, times, increments } => {
            format!(
                r#"{{"type":"hazard_reply","round":{round},"times":{},"increments":{}}}"#,
                fv(times),
                fv(increments)
            )
        }
        Message::Error { round, code, message } => {
            format!(r#"{{"type":"error","round":{round},"code":{code},"message":{message:?}}}"#)
        }
    }
}
