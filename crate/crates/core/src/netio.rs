//! Request/reply framing between local nodes and the central node.
//!
//! Every frame starts with a 10-byte header:
//!
//! | bytes | field |
//! |-------|-------|
//! | 0–1 | magic `"ET"` |
//! | 2 | version, currently 1 |
//! | 3 | kind: 0 request, 1–4 reply A1–A4, 5 error |
//! | 4–5 | node id, big-endian |
//! | 6–9 | payload length, big-endian |
//!
//! A request carries the predicted state as `n` big-endian binary64 values.
//! An error reply carries one code byte followed by a UTF-8 message.
//! The central node is stateless per request; the socket transport lives in
//! the `etmpc-tools` crate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costmodel::{predicted_bits_with, Dims, Variant};
use crate::problem::CondensedQp;
use crate::protocol::{self, Precision, ProtocolError, WireMessage};
use crate::qp::{self, QpError};
use crate::region::{self, ActiveSet, BackendKind, Region, RegionBuild, RegionError};

pub const MAGIC: [u8; 2] = *b"ET";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameKind {
    Request,
    Reply(Variant),
    Error,
}

impl FrameKind {
    pub fn code(self) -> u8 {
        match self {
            FrameKind::Request => 0,
            FrameKind::Reply(v) => 1 + v.index() as u8,
            FrameKind::Error => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FrameKind::Request),
            1..=4 => Some(FrameKind::Reply(Variant::ALL[code as usize - 1])),
            5 => Some(FrameKind::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame shorter than its header")]
    TooShort,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("payload length {declared} does not match {actual} bytes received")]
    LengthMismatch { declared: usize, actual: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub node_id: u16,
    pub payload: Vec<u8>,
}

/// Header fields needed to read the rest of a frame from a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: FrameKind,
    pub node_id: u16,
    pub payload_len: usize,
}

impl Header {
    pub fn parse(bytes: &[u8; HEADER_LEN]) -> Result<Self, FrameError> {
        if bytes[0..2] != MAGIC {
            return Err(FrameError::BadMagic);
        }
        if bytes[2] != VERSION {
            return Err(FrameError::BadVersion(bytes[2]));
        }
        let kind = FrameKind::from_code(bytes[3]).ok_or(FrameError::UnknownKind(bytes[3]))?;
        Ok(Self {
            kind,
            node_id: u16::from_be_bytes([bytes[4], bytes[5]]),
            payload_len: u32::from_be_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize,
        })
    }
}

impl Frame {
    pub fn new(kind: FrameKind, node_id: u16, payload: Vec<u8>) -> Self {
        Self { kind, node_id, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.kind.code());
        out.extend_from_slice(&self.node_id.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or(FrameError::TooShort)?;
        let header = Header::parse(header)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != header.payload_len {
            return Err(FrameError::LengthMismatch {
                declared: header.payload_len,
                actual: payload.len(),
            });
        }
        Ok(Self {
            kind: header.kind,
            node_id: header.node_id,
            payload: payload.to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRequest {
    pub node_id: u16,
    pub state: DVector<f64>,
}

impl EventRequest {
    pub fn to_frame(&self) -> Frame {
        let payload = self.state.iter().flat_map(|v| v.to_be_bytes()).collect();
        Frame::new(FrameKind::Request, self.node_id, payload)
    }

    /// Checks the payload against the expected state length `n`.
    pub fn from_frame(frame: &Frame, n: usize) -> Result<Self, ErrorCode> {
        if frame.payload.len() != 8 * n {
            return Err(ErrorCode::BadRequestLength);
        }
        let state = DVector::from_iterator(
            n,
            frame
                .payload
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes(c.try_into().expect("eight bytes"))),
        );
        Ok(Self {
            node_id: frame.node_id,
            state,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    Infeasible = 1,
    Malformed = 2,
    UnknownNode = 3,
    Degenerate = 4,
    Range = 5,
    BadRequestLength = 6,
    Internal = 7,
}

impl ErrorCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => ErrorCode::Infeasible,
            2 => ErrorCode::Malformed,
            3 => ErrorCode::UnknownNode,
            4 => ErrorCode::Degenerate,
            5 => ErrorCode::Range,
            6 => ErrorCode::BadRequestLength,
            7 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

fn error_frame(node_id: u16, code: ErrorCode, message: &str) -> Frame {
    let mut payload = Vec::with_capacity(1 + message.len());
    payload.push(code as u8);
    payload.extend_from_slice(message.as_bytes());
    Frame::new(FrameKind::Error, node_id, payload)
}

#[derive(Debug, Clone)]
pub struct NodeRegistration {
    pub qp: Arc<CondensedQp>,
    pub variant: Variant,
    pub precision: Precision,
}

/// The QP-solving server. Request handling is a pure function of the frame.
#[derive(Debug, Clone, Default)]
pub struct CentralNode {
    registry: BTreeMap<u16, NodeRegistration>,
}

impl CentralNode {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, node_id: u16, registration: NodeRegistration) {
        self.registry.insert(node_id, registration);
    }

    pub fn registration(&self, node_id: u16) -> Option<&NodeRegistration> {
        self.registry.get(&node_id)
    }

    /// Answers one encoded frame with one encoded frame. Never panics on
    /// malformed input.
    pub fn handle(&self, bytes: &[u8]) -> Vec<u8> {
        let node_id = if bytes.len() >= 6 { u16::from_be_bytes([bytes[4], bytes[5]]) } else { 0 };
        let frame = match Frame::decode(bytes) {
            Ok(f) => f,
            Err(e) => return error_frame(node_id, ErrorCode::Malformed, &e.to_string()).encode(),
        };
        self.handle_frame(&frame).encode()
    }

    pub fn handle_frame(&self, frame: &Frame) -> Frame {
        if frame.kind != FrameKind::Request {
            return error_frame(frame.node_id, ErrorCode::Malformed, "expected a request frame");
        }
        let Some(reg) = self.registry.get(&frame.node_id) else {
            return error_frame(frame.node_id, ErrorCode::UnknownNode, "node is not registered");
        };
        let request = match EventRequest::from_frame(frame, reg.qp.n()) {
            Ok(r) => r,
            Err(code) => return error_frame(frame.node_id, code, "state length does not match the problem"),
        };
        match respond(reg, &request.state) {
            Ok(message) => Frame::new(FrameKind::Reply(reg.variant), frame.node_id, message.payload),
            Err((code, text)) => error_frame(frame.node_id, code, &text),
        }
    }
}

/// Solves the QP at `x` and encodes the answer the node is registered for.
pub fn respond(reg: &NodeRegistration, x: &DVector<f64>) -> Result<WireMessage, (ErrorCode, String)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err((ErrorCode::Malformed, "state is not finite".to_string()));
    }
    let solution = qp::solve(&reg.qp, x).map_err(|e| match e {
        QpError::Infeasible => (ErrorCode::Infeasible, e.to_string()),
        QpError::DegenerateActiveSet => (ErrorCode::Degenerate, e.to_string()),
        _ => (ErrorCode::Internal, e.to_string()),
    })?;
    let region_err = |e: RegionError| match e {
        RegionError::RankDeficient { .. } => (ErrorCode::Degenerate, e.to_string()),
        _ => (ErrorCode::Internal, e.to_string()),
    };
    let protocol_err = |e: ProtocolError| match e {
        ProtocolError::Range { .. } => (ErrorCode::Range, e.to_string()),
        _ => (ErrorCode::Internal, e.to_string()),
    };
    let dims = &reg.qp.dims;
    match reg.variant {
        Variant::A1 => Ok(protocol::encode_a1(&solution.active)),
        Variant::A2 => {
            let phi = region::compute_phi(&reg.qp, &solution.active).map_err(region_err)?;
            protocol::encode_a2(&solution.active, &phi, reg.precision).map_err(protocol_err)
        }
        Variant::A3 => {
            protocol::encode_a3(&solution.u_star, dims.m, dims.horizon, reg.precision).map_err(protocol_err)
        }
        Variant::A4 => {
            let build = region::build_region(&reg.qp, &solution.active, BackendKind::LuPivoted).map_err(region_err)?;
            protocol::encode_a4(&build.region, reg.precision).map_err(protocol_err)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timed out waiting for the central node")]
    Timeout,
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl TransportError {
    /// Whether reconnecting and resending may succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, TransportError::Timeout | TransportError::ConnectionLost(_))
    }
}

/// Frame and byte counts seen by a transport.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub requests: u64,
    pub replies: u64,
    pub request_bytes: u64,
    pub reply_bytes: u64,
}

impl FrameStats {
    pub fn frames(&self) -> u64 {
        self.requests + self.replies
    }

    pub fn record(&mut self, request: &[u8], reply: &[u8]) {
        self.requests += 1;
        self.replies += 1;
        self.request_bytes += request.len() as u64;
        self.reply_bytes += reply.len() as u64;
    }
}

pub trait Transport {
    /// Sends one encoded request frame and returns the encoded reply frame.
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError>;
    fn stats(&self) -> FrameStats;
}

/// In-process transport; the central node answers instantly.
#[derive(Debug, Clone)]
pub struct Loopback {
    node: Arc<CentralNode>,
    stats: FrameStats,
}

impl Loopback {
    pub fn new(node: Arc<CentralNode>) -> Self {
        Self {
            node,
            stats: FrameStats::default(),
        }
    }
}

impl Transport for Loopback {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        let reply = self.node.handle(request);
        self.stats.record(request, &reply);
        Ok(reply)
    }

    fn stats(&self) -> FrameStats {
        self.stats
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn round_trip(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        (**self).round_trip(request)
    }

    fn stats(&self) -> FrameStats {
        (**self).stats()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error("central node reports the QP infeasible: {0}")]
    CentralInfeasible(String),
    #[error("central node reports a degenerate active set: {0}")]
    CentralDegenerate(String),
    #[error("central node error {code:?}: {message}")]
    Remote { code: Option<ErrorCode>, message: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("unexpected reply frame")]
    UnexpectedReply,
}

/// Decoded downlink content.
#[derive(Debug, Clone, PartialEq)]
pub enum Downlink {
    ActiveSet(ActiveSet),
    ActiveSetWithPhi(ActiveSet, DMatrix<f64>),
    InputSequence(DVector<f64>),
    Region(Region),
}

/// Result of one event: the message received and the region rebuilt from it.
#[derive(Debug, Clone, PartialEq)]
pub struct LawUpdate {
    pub downlink: Downlink,
    pub message: WireMessage,
    pub build: RegionBuild,
}

impl LawUpdate {
    pub fn q_active(&self) -> Option<usize> {
        self.build.region.active.as_ref().map(ActiveSet::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientConfig {
    pub node_id: u16,
    pub variant: Variant,
    pub precision: Precision,
    pub backend: BackendKind,
    /// Check `W_A Φ ≈ I` on A2 replies with this tolerance.
    pub verify_phi: Option<f64>,
}

/// The local node's side of the protocol.
pub struct LocalClient<T: Transport> {
    transport: T,
    qp: Arc<CondensedQp>,
    config: ClientConfig,
}

impl<T: Transport> LocalClient<T> {
    pub fn new(transport: T, qp: Arc<CondensedQp>, config: ClientConfig) -> Self {
        Self { transport, qp, config }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn qp(&self) -> &Arc<CondensedQp> {
        &self.qp
    }

    /// Sends `x_next` and decodes the reply without rebuilding a region.
    pub fn request(&mut self, x_next: &DVector<f64>) -> Result<(Downlink, WireMessage), ClientError> {
        let request = EventRequest {
            node_id: self.config.node_id,
            state: x_next.clone(),
        };
        let reply = self.transport.round_trip(&request.to_frame().encode())?;
        let frame = Frame::decode(&reply)?;
        if frame.node_id != self.config.node_id {
            return Err(ClientError::UnexpectedReply);
        }
        let variant = match frame.kind {
            FrameKind::Reply(v) if v == self.config.variant => v,
            FrameKind::Error => return Err(remote_error(&frame.payload)),
            _ => return Err(ClientError::UnexpectedReply),
        };
        let precision = self.config.precision;
        let d = self.qp.dims;
        let (downlink, q_active) = match variant {
            Variant::A1 => {
                let a = protocol::decode_a1(&frame.payload, d.q)?;
                let qa = a.len();
                (Downlink::ActiveSet(a), qa)
            }
            Variant::A2 => {
                let (a, phi) = protocol::decode_a2(&frame.payload, d.q, precision)?;
                if let Some(tol) = self.config.verify_phi {
                    protocol::verify_phi(&self.qp, &a, &phi, tol)?;
                }
                let qa = a.len();
                (Downlink::ActiveSetWithPhi(a, phi), qa)
            }
            Variant::A3 => (
                Downlink::InputSequence(protocol::decode_a3(&frame.payload, d.m, d.horizon, precision)?),
                0,
            ),
            Variant::A4 => (
                Downlink::Region(protocol::decode_a4(&frame.payload, d.n, d.m, d.q, precision)?),
                0,
            ),
        };
        let dims = Dims {
            n: d.n,
            m: d.m,
            horizon: d.horizon,
            q: d.q,
            q_active,
        };
        let message = WireMessage {
            variant,
            precision: if variant == Variant::A1 { Precision::Half } else { precision },
            bit_length: if variant == Variant::A1 {
                d.q as u64
            } else {
                predicted_bits_with(variant, dims, precision.bits_per_real())
            },
            payload: frame.payload,
        };
        Ok((downlink, message))
    }

    /// Requests the law for `x_next` and rebuilds its region locally.
    pub fn request_law(&mut self, x_next: &DVector<f64>) -> Result<LawUpdate, ClientError> {
        let (downlink, message) = self.request(x_next)?;
        let backend = self.config.backend;
        let build = match &downlink {
            Downlink::ActiveSet(a) => region::build_region(&self.qp, a, backend)?,
            Downlink::ActiveSetWithPhi(a, phi) => region::build_region_with_phi(&self.qp, a, phi)?,
            Downlink::InputSequence(u) => {
                let error = self.config.precision.rounding_bound(u.amax());
                region::build_region_from_rounded_input(&self.qp, u, x_next, backend, error)?
            }
            Downlink::Region(r) => RegionBuild {
                region: r.clone(),
                phi: None,
                flops: Default::default(),
            },
        };
        Ok(LawUpdate {
            downlink,
            message,
            build,
        })
    }
}

fn remote_error(payload: &[u8]) -> ClientError {
    let code = payload.first().and_then(|&b| ErrorCode::from_byte(b));
    let message = payload
        .get(1..)
        .map(|m| String::from_utf8_lossy(m).into_owned())
        .unwrap_or_default();
    match code {
        Some(ErrorCode::Infeasible) => ClientError::CentralInfeasible(message),
        Some(ErrorCode::Degenerate) => ClientError::CentralDegenerate(message),
        _ => ClientError::Remote { code, message },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::double_integrator;
    use crate::problem::condense;
    use alloc::vec;
    use nalgebra::dvector;

    fn node(variant: Variant) -> (Arc<CondensedQp>, Arc<CentralNode>) {
        let qp = Arc::new(condense(&double_integrator()).unwrap());
        let mut central = CentralNode::new();
        central.register(
            7,
            NodeRegistration {
                qp: qp.clone(),
                variant,
                precision: Precision::Full,
            },
        );
        (qp, Arc::new(central))
    }

    fn client(variant: Variant) -> LocalClient<Loopback> {
        let (qp, central) = node(variant);
        LocalClient::new(
            Loopback::new(central),
            qp,
            ClientConfig {
                node_id: 7,
                variant,
                precision: Precision::Full,
                backend: BackendKind::NaiveInverse,
                verify_phi: Some(1e-8),
            },
        )
    }

    #[test]
    fn frame_round_trip_and_header() {
        let f = Frame::new(FrameKind::Reply(Variant::A2), 0x0102, vec![9, 8, 7]);
        let bytes = f.encode();
        assert_eq!(&bytes[..10], &[b'E', b'T', 1, 2, 1, 2, 0, 0, 0, 3]);
        assert_eq!(Frame::decode(&bytes).unwrap(), f);
    }

    #[test]
    fn frame_rejections() {
        let good = Frame::new(FrameKind::Request, 1, vec![0; 4]).encode();
        assert_eq!(Frame::decode(&good[..5]), Err(FrameError::TooShort));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(Frame::decode(&bad), Err(FrameError::BadMagic));
        let mut bad = good.clone();
        bad[3] = 9;
        assert_eq!(Frame::decode(&bad), Err(FrameError::UnknownKind(9)));
        let mut bad = good.clone();
        bad[2] = 2;
        assert_eq!(Frame::decode(&bad), Err(FrameError::BadVersion(2)));
        assert_eq!(
            Frame::decode(&good[..12]),
            Err(FrameError::LengthMismatch { declared: 4, actual: 2 })
        );
    }

    #[test]
    fn origin_request_gets_empty_gamma() {
        let (_, central) = node(Variant::A1);
        let req = EventRequest { node_id: 7, state: dvector![0.0, 0.0] };
        let reply = Frame::decode(&central.handle(&req.to_frame().encode())).unwrap();
        assert_eq!(reply.kind, FrameKind::Reply(Variant::A1));
        assert_eq!(reply.payload.len(), 5);
        assert!(reply.payload.iter().all(|&b| b == 0));
    }

    #[test]
    fn server_error_replies() {
        let (_, central) = node(Variant::A1);
        let garbage = Frame::decode(&central.handle(b"nonsense")).unwrap();
        assert_eq!(garbage.kind, FrameKind::Error);
        assert_eq!(garbage.payload[0], ErrorCode::Malformed as u8);

        let unknown = EventRequest { node_id: 3, state: dvector![0.0, 0.0] };
        let reply = Frame::decode(&central.handle(&unknown.to_frame().encode())).unwrap();
        assert_eq!(reply.payload[0], ErrorCode::UnknownNode as u8);

        let short = Frame::new(FrameKind::Request, 7, vec![0; 8]);
        let reply = Frame::decode(&central.handle(&short.encode())).unwrap();
        assert_eq!(reply.payload[0], ErrorCode::BadRequestLength as u8);
    }

    #[test]
    fn infeasible_state_is_a_typed_client_error() {
        let mut c = client(Variant::A1);
        assert!(matches!(
            c.request_law(&dvector![50.0, 0.0]),
            Err(ClientError::CentralInfeasible(_))
        ));
    }

    #[test]
    fn every_variant_rebuilds_a_region_containing_the_state() {
        let x = dvector![6.0, -1.5];
        let reference = qp::solve(&condense(&double_integrator()).unwrap(), &x).unwrap();
        for v in Variant::ALL {
            let mut c = client(v);
            let update = c.request_law(&x).unwrap();
            assert_eq!(update.message.variant, v);
            assert!(update.build.region.contains(&x), "{v}");
            let u = update.build.region.law(&x);
            assert!((u[0] - reference.u_star[0]).abs() < 1e-9, "{v}");
            assert_eq!(c.transport().stats().requests, 1);
        }
    }
}
