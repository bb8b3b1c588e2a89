//! Byte layouts of the four downlink messages.
//!
//! | variant | payload |
//! |---------|---------|
//! | A1 | γ: one bit per constraint row, MSB first, zero padded to whole bytes |
//! | A2 | γ bytes, then the lower triangle of Φ row by row |
//! | A3 | U*, mN reals |
//! | A4 | K (m×n), b (m), T (q×n), d (q), matrices row-major |
//!
//! Reals are big-endian IEEE 754 binary16 (round to nearest even) or, at
//! full precision, big-endian binary64. `bit_length` is the information
//! content of the message, `payload.len() * 8` minus padding.

use alloc::vec::Vec;
use core::fmt;

use half::f16;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costmodel::{predicted_bits_with, Dims, Variant};
use crate::problem::CondensedQp;
use crate::region::{active_gram, ActiveSet, Region};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("{value} is not representable as binary16")]
    Range { value: f64 },
    #[error("malformed payload: {0}")]
    Framing(&'static str),
    #[error("Φ does not invert the active Gram matrix (residual {residual:e})")]
    PhiMismatch { residual: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(&'static str),
}

/// IEEE 754 binary16 value.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Half(pub f16);

impl Half {
    /// Rounds to nearest even. Values that overflow to infinity, infinities
    /// and NaN are rejected.
    pub fn from_f64(value: f64) -> Result<Self, ProtocolError> {
        let h = f16::from_f64(value);
        if h.is_finite() {
            Ok(Self(h))
        } else {
            Err(ProtocolError::Range { value })
        }
    }

    pub fn to_f64(self) -> f64 {
        self.0.to_f64()
    }

    pub fn to_be_bytes(self) -> [u8; 2] {
        self.0.to_be_bytes()
    }

    pub fn from_be_bytes(bytes: [u8; 2]) -> Self {
        Self(f16::from_be_bytes(bytes))
    }
}

/// Encoding of real numbers on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    Half,
    Full,
}

impl Precision {
    pub fn bits_per_real(self) -> u64 {
        match self {
            Precision::Half => 16,
            Precision::Full => 64,
        }
    }

    pub fn bytes_per_real(self) -> usize {
        self.bits_per_real() as usize / 8
    }

    /// Largest rounding error of a decoded value of magnitude at most
    /// `max_abs`: half an ulp, relative `2⁻¹¹` above the subnormal spacing
    /// `2⁻²⁴`. Zero at full precision.
    pub fn rounding_bound(self, max_abs: f64) -> f64 {
        match self {
            Precision::Half => max_abs * libm::ldexp(1.0, -11) + libm::ldexp(1.0, -25),
            Precision::Full => 0.0,
        }
    }

    /// The value a real takes after a round trip through this precision.
    pub fn quantize(self, value: f64) -> Result<f64, ProtocolError> {
        match self {
            Precision::Half => Half::from_f64(value).map(Half::to_f64),
            Precision::Full if value.is_finite() => Ok(value),
            Precision::Full => Err(ProtocolError::Range { value }),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Half => "half",
            Precision::Full => "full",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub variant: Variant,
    pub precision: Precision,
    pub payload: Vec<u8>,
    pub bit_length: u64,
}

fn push_real(out: &mut Vec<u8>, value: f64, precision: Precision) -> Result<(), ProtocolError> {
    match precision {
        Precision::Half => out.extend_from_slice(&Half::from_f64(value)?.to_be_bytes()),
        Precision::Full => {
            if !value.is_finite() {
                return Err(ProtocolError::Range { value });
            }
            out.extend_from_slice(&value.to_be_bytes());
        }
    }
    Ok(())
}

/// Cursor over a sequence of reals.
struct Reals<'a> {
    bytes: &'a [u8],
    precision: Precision,
}

impl Reals<'_> {
    fn next(&mut self) -> f64 {
        match self.precision {
            Precision::Half => {
                let (head, rest) = self.bytes.split_at(2);
                self.bytes = rest;
                Half::from_be_bytes([head[0], head[1]]).to_f64()
            }
            Precision::Full => {
                let (head, rest) = self.bytes.split_at(8);
                self.bytes = rest;
                f64::from_be_bytes(head.try_into().expect("eight bytes"))
            }
        }
    }

    /// Row-major `rows × cols` matrix.
    fn matrix(&mut self, rows: usize, cols: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = self.next();
            }
        }
        m
    }

    fn vector(&mut self, len: usize) -> DVector<f64> {
        DVector::from_iterator(len, (0..len).map(|_| self.next()))
    }
}

fn expect_len(payload: &[u8], expected: usize) -> Result<(), ProtocolError> {
    match payload.len().cmp(&expected) {
        core::cmp::Ordering::Less => Err(ProtocolError::Framing("payload too short")),
        core::cmp::Ordering::Greater => Err(ProtocolError::Framing("payload too long")),
        core::cmp::Ordering::Equal => Ok(()),
    }
}

fn gamma_bytes(q: usize) -> usize {
    q.div_ceil(8)
}

fn pack_gamma(active: &ActiveSet) -> Vec<u8> {
    let mut out = alloc::vec![0u8; gamma_bytes(active.q())];
    for &i in active.indices() {
        out[i / 8] |= 0x80 >> (i % 8);
    }
    out
}

fn unpack_gamma(bytes: &[u8], q: usize) -> Result<ActiveSet, ProtocolError> {
    let used = q % 8;
    if used != 0 && bytes[bytes.len() - 1] & (0xFF >> used) != 0 {
        return Err(ProtocolError::Framing("nonzero padding bits"));
    }
    let flags: Vec<bool> = (0..q).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
    Ok(ActiveSet::from_flags(&flags))
}

fn message(variant: Variant, precision: Precision, payload: Vec<u8>, dims: Dims) -> WireMessage {
    WireMessage {
        variant,
        precision,
        payload,
        bit_length: predicted_bits_with(variant, dims, precision.bits_per_real()),
    }
}

fn box_dims(n: usize, m: usize, horizon: usize, q: usize, q_active: usize) -> Dims {
    Dims {
        n,
        m,
        horizon,
        q,
        q_active,
    }
}

/// γ only; carries no reals, so its precision is nominal.
pub fn encode_a1(active: &ActiveSet) -> WireMessage {
    let q = active.q();
    WireMessage {
        variant: Variant::A1,
        precision: Precision::Half,
        payload: pack_gamma(active),
        bit_length: q as u64,
    }
}

pub fn decode_a1(payload: &[u8], q: usize) -> Result<ActiveSet, ProtocolError> {
    expect_len(payload, gamma_bytes(q))?;
    unpack_gamma(payload, q)
}

pub fn encode_a2(active: &ActiveSet, phi: &DMatrix<f64>, precision: Precision) -> Result<WireMessage, ProtocolError> {
    let qa = active.len();
    if phi.shape() != (qa, qa) {
        return Err(ProtocolError::Shape("Φ does not match the active set"));
    }
    let mut payload = pack_gamma(active);
    for i in 0..qa {
        for j in 0..=i {
            push_real(&mut payload, phi[(i, j)], precision)?;
        }
    }
    // only q and q_A enter the bit count
    let dims = box_dims(0, 0, 0, active.q(), qa);
    Ok(message(Variant::A2, precision, payload, dims))
}

/// Returns the active set and the symmetric Φ rebuilt from its lower triangle.
pub fn decode_a2(payload: &[u8], q: usize, precision: Precision) -> Result<(ActiveSet, DMatrix<f64>), ProtocolError> {
    let head = gamma_bytes(q);
    if payload.len() < head {
        return Err(ProtocolError::Framing("payload too short"));
    }
    let active = unpack_gamma(&payload[..head], q)?;
    let qa = active.len();
    let body = &payload[head..];
    expect_len(body, qa * (qa + 1) / 2 * precision.bytes_per_real())?;
    let mut reals = Reals { bytes: body, precision };
    let mut phi = DMatrix::zeros(qa, qa);
    for i in 0..qa {
        for j in 0..=i {
            let v = reals.next();
            phi[(i, j)] = v;
            phi[(j, i)] = v;
        }
    }
    Ok((active, phi))
}

/// `‖W_A Φ − I‖∞ ≤ tol`.
pub fn verify_phi(qp: &CondensedQp, active: &ActiveSet, phi: &DMatrix<f64>, tol: f64) -> Result<(), ProtocolError> {
    if phi.shape() != (active.len(), active.len()) {
        return Err(ProtocolError::Shape("Φ does not match the active set"));
    }
    let residual = active_gram(qp, active) * phi - DMatrix::<f64>::identity(active.len(), active.len());
    let residual = crate::linalg::inf_norm(&residual);
    if residual <= tol {
        Ok(())
    } else {
        Err(ProtocolError::PhiMismatch { residual })
    }
}

pub fn encode_a3(u_star: &DVector<f64>, m: usize, horizon: usize, precision: Precision) -> Result<WireMessage, ProtocolError> {
    if u_star.len() != m * horizon {
        return Err(ProtocolError::Shape("U* must have mN entries"));
    }
    let mut payload = Vec::with_capacity(u_star.len() * precision.bytes_per_real());
    for &v in u_star.iter() {
        push_real(&mut payload, v, precision)?;
    }
    Ok(message(Variant::A3, precision, payload, box_dims(0, m, horizon, 0, 0)))
}

pub fn decode_a3(payload: &[u8], m: usize, horizon: usize, precision: Precision) -> Result<DVector<f64>, ProtocolError> {
    let len = m * horizon;
    expect_len(payload, len * precision.bytes_per_real())?;
    Ok(Reals { bytes: payload, precision }.vector(len))
}

pub fn encode_a4(region: &Region, precision: Precision) -> Result<WireMessage, ProtocolError> {
    let (m, n) = region.gain.shape();
    let q = region.t.nrows();
    if region.offset.len() != m || region.t.ncols() != n || region.d.len() != q {
        return Err(ProtocolError::Shape("inconsistent region"));
    }
    let mut payload = Vec::with_capacity((m * n + m + q * n + q) * precision.bytes_per_real());
    for matrix in [&region.gain, &region.t] {
        for i in 0..matrix.nrows() {
            for j in 0..n {
                push_real(&mut payload, matrix[(i, j)], precision)?;
            }
        }
        let vector = if core::ptr::eq(matrix, &region.gain) { &region.offset } else { &region.d };
        for &v in vector.iter() {
            push_real(&mut payload, v, precision)?;
        }
    }
    Ok(message(Variant::A4, precision, payload, box_dims(n, m, 0, q, 0)))
}

/// The decoded region carries no active set.
pub fn decode_a4(payload: &[u8], n: usize, m: usize, q: usize, precision: Precision) -> Result<Region, ProtocolError> {
    expect_len(payload, (m * n + m + q * n + q) * precision.bytes_per_real())?;
    let mut reals = Reals { bytes: payload, precision };
    let gain = reals.matrix(m, n);
    let offset = reals.vector(m);
    let t = reals.matrix(q, n);
    let d = reals.vector(q);
    Ok(Region {
        gain,
        offset,
        t,
        d,
        active: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn half_conversions() {
        assert_eq!(Half::from_f64(1.0).unwrap().to_be_bytes(), [0x3C, 0x00]);
        assert_eq!(Half::from_f64(65504.0).unwrap().to_f64(), 65504.0);
        assert!(matches!(Half::from_f64(65520.0), Err(ProtocolError::Range { .. })));
        assert!(Half::from_f64(f64::NAN).is_err());
        assert!(Half::from_f64(f64::INFINITY).is_err());
        // 2^-24 is the smallest subnormal
        assert_eq!(Half::from_f64(libm::ldexp(1.0, -24)).unwrap().to_be_bytes(), [0x00, 0x01]);
        // ties round to even: 1 + 2^-11 lies halfway between 1 and 1 + 2^-10
        assert_eq!(Half::from_f64(1.0 + libm::ldexp(1.0, -11)).unwrap().to_f64(), 1.0);
    }

    #[test]
    fn rounding_bound_covers_every_rounding() {
        assert_eq!(Precision::Full.rounding_bound(1e9), 0.0);
        for &v in &[0.0, 1e-9, 3e-6, 0.1, 0.49999, 1.0 / 3.0, 7.77, 1234.5678, -60000.0] {
            let err = (Precision::Half.quantize(v).unwrap() - v).abs();
            assert!(err <= Precision::Half.rounding_bound(libm::fabs(v)), "{v}");
        }
    }

    #[test]
    fn a1_bit_order() {
        let active = ActiveSet::new(10, vec![0, 9]).unwrap();
        let msg = encode_a1(&active);
        assert_eq!(msg.payload, vec![0x80, 0x40]);
        assert_eq!(msg.bit_length, 10);
        assert_eq!(decode_a1(&msg.payload, 10).unwrap(), active);
    }

    #[test]
    fn a1_rejects_bad_payloads() {
        assert_eq!(decode_a1(&[0x80], 10), Err(ProtocolError::Framing("payload too short")));
        assert_eq!(decode_a1(&[0x80, 0x20], 10), Err(ProtocolError::Framing("nonzero padding bits")));
    }

    #[test]
    fn a1_empty_and_full() {
        let empty = ActiveSet::empty(236);
        let msg = encode_a1(&empty);
        assert_eq!(msg.payload.len(), 30);
        assert!(msg.payload.iter().all(|&b| b == 0));
        assert_eq!(msg.bit_length, 236);
        let all = ActiveSet::new(16, (0..16).collect()).unwrap();
        assert_eq!(encode_a1(&all).payload, vec![0xFF, 0xFF]);
    }

    #[test]
    fn a2_layout() {
        let active = ActiveSet::new(10, vec![2]).unwrap();
        let phi = dmatrix![0.5];
        let msg = encode_a2(&active, &phi, Precision::Half).unwrap();
        assert_eq!(msg.payload, vec![0x20, 0x00, 0x38, 0x00]);
        assert_eq!(msg.bit_length, 26);
        let (a, p) = decode_a2(&msg.payload, 10, Precision::Half).unwrap();
        assert_eq!(a, active);
        assert_eq!(p, phi);
    }

    #[test]
    fn a2_restores_symmetry() {
        let active = ActiveSet::new(4, vec![0, 3]).unwrap();
        let phi = dmatrix![2.0, -1.0; -1.0, 3.0];
        let msg = encode_a2(&active, &phi, Precision::Full).unwrap();
        assert_eq!(msg.bit_length, 64 * 3 + 4);
        let (_, p) = decode_a2(&msg.payload, 4, Precision::Full).unwrap();
        assert_eq!(p, phi);
        assert!(decode_a2(&msg.payload[..msg.payload.len() - 1], 4, Precision::Full).is_err());
    }

    #[test]
    fn a3_round_trip() {
        let u = dvector![0.25, -0.5, 0.125];
        let msg = encode_a3(&u, 1, 3, Precision::Half).unwrap();
        assert_eq!(msg.payload.len(), 6);
        assert_eq!(msg.bit_length, 48);
        assert_eq!(decode_a3(&msg.payload, 1, 3, Precision::Half).unwrap(), u);
        assert!(encode_a3(&dvector![1e6], 1, 1, Precision::Half).is_err());
    }

    #[test]
    fn a4_layout() {
        // n = 1, m = 1, q = 2
        let region = Region {
            gain: dmatrix![1.0],
            offset: dvector![2.0],
            t: dmatrix![3.0; 4.0],
            d: dvector![5.0, 6.0],
            active: None,
        };
        let msg = encode_a4(&region, Precision::Half).unwrap();
        assert_eq!(msg.bit_length, 96);
        let decoded: Vec<f64> = msg
            .payload
            .chunks(2)
            .map(|c| Half::from_be_bytes([c[0], c[1]]).to_f64())
            .collect();
        assert_eq!(decoded, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(decode_a4(&msg.payload, 1, 1, 2, Precision::Half).unwrap(), region);
    }
}
