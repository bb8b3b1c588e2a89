//! Exact bit and flop accounting for the four downlink encodings.
//!
//! Conventions: a real number on the wire costs 16 bits (IEEE 754 binary16);
//! a multiplication or addition costs one flop, a division ten. The cost of
//! a whole matrix kernel is taken from the table below, which is also what
//! the instrumented region builder charges:
//!
//! | operation | flops |
//! |-----------|-------|
//! | `M + M̃`, `cM` (m×n) | `mn` |
//! | `MV` ((m×n)(n×l)) | `ml(2n − 1)` |
//! | `M⁻¹` (n×n) | `(2n³ + 18n² + 10n)/3` |
//!
//! The product formula is used verbatim even for an empty inner dimension,
//! where it goes negative; the per-encoding polynomials rely on it at
//! `q_A = 0`. Sign flips are not floating-point arithmetic and cost nothing.
//!
//! All counts are exact integers and ratios are exact rationals.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_rational::Ratio;
use thiserror::Error;

use crate::problem::box_constraint_count;

/// Bits per transmitted real under binary16.
pub const BITS_PER_REAL: u64 = 16;
/// Flop weight of one division.
pub const FLOPS_PER_DIVISION: i64 = 10;

/// The four downlink encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Active-set bits γ.
    A1,
    /// γ plus the lower triangle of Φ.
    A2,
    /// The optimizer U*.
    A3,
    /// K, b, T, d.
    A4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A1, Variant::A2, Variant::A3, Variant::A4];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A1 => "A1",
            Variant::A2 => "A2",
            Variant::A3 => "A3",
            Variant::A4 => "A4",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown encoding variant (expected A1, A2, A3 or A4)")]
pub struct ParseVariantError;

impl FromStr for Variant {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A1" | "a1" => Ok(Variant::A1),
            "A2" | "a2" => Ok(Variant::A2),
            "A3" | "a3" => Ok(Variant::A3),
            "A4" | "a4" => Ok(Variant::A4),
            _ => Err(ParseVariantError),
        }
    }
}

/// Problem dimensions plus the active-set size of one event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub q: usize,
    pub q_active: usize,
}

impl Dims {
    /// Dimensions of a box-constrained problem, `q = 2mN + 2nN + 2n`.
    pub fn for_box(n: usize, m: usize, horizon: usize, q_active: usize) -> Self {
        Self {
            n,
            m,
            horizon,
            q: box_constraint_count(n, m, horizon),
            q_active,
        }
    }

    pub fn with_active(self, q_active: usize) -> Self {
        Self { q_active, ..self }
    }

    pub fn decision_len(&self) -> usize {
        self.m * self.horizon
    }

    pub fn is_box(&self) -> bool {
        self.q == box_constraint_count(self.n, self.m, self.horizon)
    }

    /// `q_A ≤ min(q, mN)`.
    pub fn is_valid(&self) -> bool {
        self.q_active <= self.q.min(self.decision_len())
    }

    fn signed(&self) -> (i64, i64, i64, i64, i64) {
        (
            self.n as i64,
            self.m as i64,
            self.horizon as i64,
            self.q as i64,
            self.q_active as i64,
        )
    }
}

/// A matrix kernel whose cost is given by the flop table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixOp {
    Add { rows: usize, cols: usize },
    Scale { rows: usize, cols: usize },
    Multiply { rows: usize, inner: usize, cols: usize },
    Inverse { n: usize },
}

pub fn op_flops(op: MatrixOp) -> i64 {
    match op {
        MatrixOp::Add { rows, cols } | MatrixOp::Scale { rows, cols } => (rows * cols) as i64,
        MatrixOp::Multiply { rows, inner, cols } => (rows * cols) as i64 * (2 * inner as i64 - 1),
        MatrixOp::Inverse { n } => inversion_flops(n),
    }
}

/// `(2n³ + 18n² + 10n)/3`, always an integer.
pub fn inversion_flops(n: usize) -> i64 {
    let n = n as i64;
    (2 * n * n * n + 18 * n * n + 10 * n) / 3
}

/// Transmitted bits of one event, with 16 bits per real.
pub fn predicted_bits(variant: Variant, dims: Dims) -> u64 {
    predicted_bits_with(variant, dims, BITS_PER_REAL)
}

/// Transmitted bits of one event for an arbitrary number of bits per real.
pub fn predicted_bits_with(variant: Variant, dims: Dims, bits_per_real: u64) -> u64 {
    let (n, m, horizon, q, qa) = (
        dims.n as u64,
        dims.m as u64,
        dims.horizon as u64,
        dims.q as u64,
        dims.q_active as u64,
    );
    match variant {
        Variant::A1 => q,
        Variant::A2 => bits_per_real * (qa * qa + qa) / 2 + q,
        Variant::A3 => bits_per_real * m * horizon,
        Variant::A4 => bits_per_real * (m * n + m + q * n + q),
    }
}

/// Flops on the local node to recover the law and polytope of one event.
pub fn predicted_flops(variant: Variant, dims: Dims) -> i64 {
    let (n, m, horizon, q, qa) = dims.signed();
    let mn = m * horizon;
    let shared = (q * n + q + m + m * n) * (2 * qa - 1);
    // (2/3)q_A³ + 6q_A² + (7/3)q_A
    let cubic = (2 * qa * qa * qa + 18 * qa * qa + 7 * qa) / 3;
    match variant {
        Variant::A1 => {
            (mn * qa + m * n + q * qa) * (2 * mn - 1) + shared + cubic + q * n + q - qa * n + m * n
        }
        Variant::A2 => {
            (mn * qa + m * n + q * qa - qa * qa) * (2 * mn - 1) + shared + q * n + q - qa * n - qa
                + m * n
        }
        Variant::A3 => {
            (mn * qa + m * n + q * qa + q) * (2 * mn - 1) + shared + cubic + 3 * q * n + 2 * q
                - qa * n
                + m * n
        }
        Variant::A4 => 0,
    }
}

/// Flops of the inversion (`inv`) versus all other matrix operations (`mat`)
/// of the active-set encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EtaSplit {
    pub inv: i64,
    pub mat: i64,
}

impl EtaSplit {
    pub fn total(&self) -> i64 {
        self.inv + self.mat
    }

    /// `inv / mat`, or `None` when `mat` is not positive.
    pub fn ratio(&self) -> Option<Ratio<i64>> {
        (self.mat > 0).then(|| Ratio::new(self.inv, self.mat))
    }
}

/// Coefficients of `η_mat(q_A) = α q_A + β`.
pub fn eta_mat_coefficients(dims: Dims) -> (i64, i64) {
    let (n, m, horizon, q, _) = dims.signed();
    let mn = m * horizon;
    let alpha = (mn + q) * (2 * mn - 1) - n - 1 + 2 * m + 2 * m * n + 2 * q * n + 2 * q;
    let beta = -m + m * n * (2 * mn - 1);
    (alpha, beta)
}

pub fn eta_split(dims: Dims) -> EtaSplit {
    let (alpha, beta) = eta_mat_coefficients(dims);
    EtaSplit {
        inv: inversion_flops(dims.q_active),
        mat: alpha * dims.q_active as i64 + beta,
    }
}

/// The bound `η_inv/η_mat ≤ 18/79`.
pub fn ratio_bound() -> Ratio<i64> {
    Ratio::new(18, 79)
}

/// Bits and flops of one encoding at one active-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub variant: Variant,
    pub dims: Dims,
    pub bits: u64,
    pub flops: i64,
    pub flops_inv: i64,
    pub flops_mat: i64,
    pub ratio: Option<Ratio<i64>>,
}

pub fn cost_report(variant: Variant, dims: Dims) -> CostReport {
    let flops = predicted_flops(variant, dims);
    let flops_inv = match variant {
        Variant::A1 | Variant::A3 => inversion_flops(dims.q_active),
        Variant::A2 | Variant::A4 => 0,
    };
    let flops_mat = flops - flops_inv;
    CostReport {
        variant,
        dims,
        bits: predicted_bits(variant, dims),
        flops,
        flops_inv,
        flops_mat,
        ratio: (flops_mat > 0).then(|| Ratio::new(flops_inv, flops_mat)),
    }
}

/// Sweep of `η_inv/η_mat` over `q_A ∈ {0..mN}` for one box-constrained shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSweep {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub ratios: Vec<Ratio<i64>>,
    pub max_ratio: Ratio<i64>,
    pub argmax: usize,
    /// Every point satisfies `ratio ≤ 18/79`.
    pub bound_holds: bool,
    /// The ratio never decreases as `q_A` grows.
    pub monotone: bool,
}

pub fn check_ratio_bound(n: usize, m: usize, horizon: usize) -> RatioSweep {
    let base = Dims::for_box(n, m, horizon, 0);
    let bound = ratio_bound();
    let ratios: Vec<Ratio<i64>> = (0..=base.decision_len())
        .map(|qa| {
            eta_split(base.with_active(qa))
                .ratio()
                .unwrap_or_else(|| Ratio::from_integer(i64::MAX))
        })
        .collect();
    let (argmax, max_ratio) = ratios
        .iter()
        .enumerate()
        .fold((0, Ratio::from_integer(0)), |(bi, br), (i, &r)| {
            if r > br {
                (i, r)
            } else {
                (bi, br)
            }
        });
    RatioSweep {
        n,
        m,
        horizon,
        bound_holds: ratios.iter().all(|r| *r <= bound),
        monotone: ratios.windows(2).all(|w| w[0] <= w[1]),
        ratios,
        max_ratio,
        argmax,
    }
}

/// Direct bit counts of the four encodings at one `q_A`, with the
/// sufficient condition for `bits(A3) > bits(A2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodingRow {
    pub q_active: usize,
    pub bits: [u64; 4],
    /// `(λ−2)/3 > n/m + λ q_A(q_A+1)/(6mN)` holds strictly.
    pub a2_threshold_strict: bool,
}

impl EncodingRow {
    pub fn bits_of(&self, v: Variant) -> u64 {
        self.bits[v.index()]
    }
}

/// Outcome of comparing a threshold prediction with direct counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    /// The sufficient condition holds strictly and the direct counts agree.
    Confirmed,
    /// The sufficient condition holds strictly but the counts disagree.
    Contradicted,
    /// The condition does not hold strictly; no claim is made.
    NoPrediction,
}

/// Partial order of the encodings by transmitted bits for one box shape.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingComparison {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub q: usize,
    pub bits_per_real: u64,
    pub rows: Vec<EncodingRow>,
    /// Exact comparison of `(λ−2)/3` with `n/m`.
    pub a1_threshold: core::cmp::Ordering,
    /// `bits(A3) > bits(A1)` as predicted by the strict threshold.
    pub a1_prediction: Prediction,
    pub a2_predictions: Vec<Prediction>,
}

impl EncodingComparison {
    pub fn a1_le_a2(&self) -> bool {
        self.rows.iter().all(|r| r.bits[0] <= r.bits[1])
    }

    /// `bits(v) ≤ bits(A4)` for every `q_A`.
    pub fn le_a4(&self, v: Variant) -> bool {
        self.rows.iter().all(|r| r.bits_of(v) <= r.bits[3])
    }

    /// `q_A` values where `bits(v) > bits(A4)`.
    pub fn a4_violations(&self, v: Variant) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.bits_of(v) > r.bits[3])
            .map(|r| r.q_active)
            .collect()
    }

    pub fn predictions_hold(&self) -> bool {
        self.a1_prediction != Prediction::Contradicted
            && self.a2_predictions.iter().all(|p| *p != Prediction::Contradicted)
    }
}

pub fn compare_encodings(n: usize, m: usize, horizon: usize) -> EncodingComparison {
    compare_encodings_with(n, m, horizon, BITS_PER_REAL)
}

pub fn compare_encodings_with(
    n: usize,
    m: usize,
    horizon: usize,
    bits_per_real: u64,
) -> EncodingComparison {
    let base = Dims::for_box(n, m, horizon, 0);
    let lambda = bits_per_real as i64;
    let (ni, mi, hi) = (n as i64, m as i64, horizon as i64);
    let rows: Vec<EncodingRow> = (0..=base.decision_len())
        .map(|qa| {
            let d = base.with_active(qa);
            let qa = qa as i64;
            // (λ−2)/3 > n/m + λ q_A(q_A+1)/(6mN), scaled by 6mN
            let strict = 2 * mi * hi * (lambda - 2) > 6 * ni * hi + lambda * qa * (qa + 1);
            EncodingRow {
                q_active: d.q_active,
                bits: Variant::ALL.map(|v| predicted_bits_with(v, d, bits_per_real)),
                a2_threshold_strict: strict,
            }
        })
        .collect();

    // (λ−2)/3 vs n/m  <=>  (λ−2)m vs 3n
    let a1_threshold = ((lambda - 2) * mi).cmp(&(3 * ni));
    let a1_prediction = if a1_threshold == core::cmp::Ordering::Greater {
        if rows.iter().all(|r| r.bits[2] > r.bits[0]) {
            Prediction::Confirmed
        } else {
            Prediction::Contradicted
        }
    } else {
        Prediction::NoPrediction
    };
    let a2_predictions = rows
        .iter()
        .map(|r| match (r.a2_threshold_strict, r.bits[2] > r.bits[1]) {
            (false, _) => Prediction::NoPrediction,
            (true, true) => Prediction::Confirmed,
            (true, false) => Prediction::Contradicted,
        })
        .collect();

    EncodingComparison {
        n,
        m,
        horizon,
        q: base.q,
        bits_per_real,
        rows,
        a1_threshold,
        a1_prediction,
        a2_predictions,
    }
}

/// Which side of the split a charged operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bucket {
    Inversion,
    Matrix,
}

/// Flop counter the region builder reports into.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct FlopTally {
    pub inversion: i64,
    pub matrix: i64,
}

impl FlopTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total(&self) -> i64 {
        self.inversion + self.matrix
    }

    /// Charges the table cost of `op`.
    pub fn charge(&mut self, bucket: Bucket, op: MatrixOp) {
        self.charge_raw(bucket, op_flops(op));
    }

    /// Charges literal scalar work: `arith` multiplications/additions and
    /// `divisions` divisions.
    pub fn charge_scalar(&mut self, bucket: Bucket, arith: usize, divisions: usize) {
        self.charge_raw(bucket, arith as i64 + FLOPS_PER_DIVISION * divisions as i64);
    }

    fn charge_raw(&mut self, bucket: Bucket, flops: i64) {
        match bucket {
            Bucket::Inversion => self.inversion += flops,
            Bucket::Matrix => self.matrix += flops,
        }
    }

    pub fn split(&self) -> EtaSplit {
        EtaSplit {
            inv: self.inversion,
            mat: self.matrix,
        }
    }
}

impl core::ops::AddAssign for FlopTally {
    fn add_assign(&mut self, rhs: Self) {
        self.inversion += rhs.inversion;
        self.matrix += rhs.matrix;
    }
}
