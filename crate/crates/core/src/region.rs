//! Explicit affine law and polyhedral region of one active set.
//!
//! For an active set `A` with complement `I` and `M` the first `m` rows of the
//! decision vector:
//!
//! ```text
//! Y = H⁻¹G_A'      W = G Y       Φ = (W_A)⁻¹
//! Z = Φ S_A        z = Φ w_A
//! K = Y_M Z − (H⁻¹F')_M          b = Y_M z
//! T = [W_I Z − S_I; Z]           d = [w_I − W_I z; −z]
//! ```
//!
//! The multipliers on the region are `λ(x) = −(Zx + z)`, so the last block of
//! `Tx ≤ d` is dual feasibility. The naive backend charges every kernel its
//! table cost, which reproduces the analytic A1/A2/A3 flop counts exactly.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costmodel::{Bucket, FlopTally, MatrixOp};
use crate::linalg::inf_norm;
use crate::problem::CondensedQp;

/// Relative pivot threshold below which `W_A` is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-10;
/// Slack allowed on each row of `Tx ≤ d`, relative to `1 + |d_i|`.
pub const CONTAINMENT_TOLERANCE: f64 = 1e-9;
/// Closed threshold on `GU − Ex − w` for recovering an active set from `U*`.
pub const ACTIVE_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegionError {
    #[error("active constraint matrix is rank deficient (pivot {pivot:e} at step {step})")]
    RankDeficient { step: usize, pivot: f64 },
    #[error("constraint index {index} out of range for q = {q}")]
    IndexOutOfRange { index: usize, q: usize },
    #[error("dimension mismatch: {0}")]
    Shape(&'static str),
}

/// Sorted set of active constraint rows out of `q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActiveSet {
    q: usize,
    indices: Vec<usize>,
}

impl ActiveSet {
    pub fn new(q: usize, mut indices: Vec<usize>) -> Result<Self, RegionError> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.last() {
            if index >= q {
                return Err(RegionError::IndexOutOfRange { index, q });
            }
        }
        Ok(Self { q, indices })
    }

    pub fn empty(q: usize) -> Self {
        Self { q, indices: Vec::new() }
    }

    pub fn from_flags(flags: &[bool]) -> Self {
        Self {
            q: flags.len(),
            indices: flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
        }
    }

    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = alloc::vec![false; self.q];
        for &i in &self.indices {
            flags[i] = true;
        }
        flags
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn complement(&self) -> Vec<usize> {
        (0..self.q).filter(|i| !self.contains(*i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackendKind {
    /// Explicit Gauss–Jordan inverse of `W_A`, flops charged from the table.
    #[default]
    NaiveInverse,
    /// Partially pivoted LU solve, flops counted literally.
    LuPivoted,
}

/// Affine law `u = Kx + b` valid on `{x : Tx ≤ d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub t: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Rows of `T` are the inactive rows in index order, then the active ones.
    pub active: Option<ActiveSet>,
}

impl Region {
    pub fn law(&self, x: &DVector<f64>) -> DVector<f64> {
        evaluate_law(self, x)
    }

    /// Row-by-row test of `Tx ≤ d` with slack `1e-9 (1 + |d_i|)`, stopping at
    /// the first violated row.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        (0..self.t.nrows()).all(|i| {
            let lhs = self.t.row(i).iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>();
            lhs - self.d[i] <= CONTAINMENT_TOLERANCE * (1.0 + self.d[i].abs())
        })
    }

    /// `max_i (T_i x − d_i)`; nonpositive inside the region.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let r = &self.t * x - &self.d;
        r.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn evaluate_law(region: &Region, x: &DVector<f64>) -> DVector<f64> {
    &region.gain * x + &region.offset
}

/// A region together with what it cost to build.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBuild {
    pub region: Region,
    /// `Φ = (W_A)⁻¹`, when the backend formed it.
    pub phi: Option<DMatrix<f64>>,
    pub flops: FlopTally,
}

/// `W_A = G_A H⁻¹ G_A'`.
pub fn active_gram(qp: &CondensedQp, active: &ActiveSet) -> DMatrix<f64> {
    qp.gram.select_rows(active.indices()).select_columns(active.indices())
}

/// `Φ = (W_A)⁻¹` by Gauss–Jordan elimination.
pub fn compute_phi(qp: &CondensedQp, active: &ActiveSet) -> Result<DMatrix<f64>, RegionError> {
    check_active(qp, active)?;
    gauss_jordan_inverse(&active_gram(qp, active))
}

/// Gauss–Jordan inverse with partial pivoting. Fails when a pivot falls
/// below `1e-10 ‖M‖∞`.
pub fn gauss_jordan_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, RegionError> {
    if !m.is_square() {
        return Err(RegionError::Shape("inverse of a non-square matrix"));
    }
    let n = m.nrows();
    let threshold = PIVOT_TOLERANCE * inf_norm(m);
    let mut a = m.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for k in 0..n {
        let (p, pivot) = (k..n)
            .map(|i| (i, a[(i, k)]))
            .fold((k, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
        if pivot.abs() <= threshold || pivot == 0.0 {
            return Err(RegionError::RankDeficient { step: k, pivot: pivot.abs() });
        }
        a.swap_rows(k, p);
        inv.swap_rows(k, p);
        let scale = 1.0 / pivot;
        for j in 0..n {
            a[(k, j)] *= scale;
            inv[(k, j)] *= scale;
        }
        for i in 0..n {
            if i == k {
                continue;
            }
            let factor = a[(i, k)];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                a[(i, j)] -= factor * a[(k, j)];
                inv[(i, j)] -= factor * inv[(k, j)];
            }
        }
    }
    Ok(inv)
}

/// Partially pivoted LU factorization `PA = LU`, stored in place.
struct Lu {
    lu: DMatrix<f64>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(m: &DMatrix<f64>, tally: &mut FlopTally) -> Result<Self, RegionError> {
        let n = m.nrows();
        let threshold = PIVOT_TOLERANCE * inf_norm(m);
        let mut lu = m.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)]))
                .fold((k, 0.0f64), |best, (i, v)| if v.abs() > best.1.abs() { (i, v) } else { best });
            if pivot.abs() <= threshold || pivot == 0.0 {
                return Err(RegionError::RankDeficient { step: k, pivot: pivot.abs() });
            }
            lu.swap_rows(k, p);
            perm.swap(k, p);
            let rest = n - k - 1;
            for i in (k + 1)..n {
                let l = lu[(i, k)] / pivot;
                lu[(i, k)] = l;
                for j in (k + 1)..n {
                    lu[(i, j)] -= l * lu[(k, j)];
                }
            }
            tally.charge_scalar(Bucket::Inversion, 2 * rest * rest, rest);
        }
        Ok(Self { lu, perm })
    }

    /// Solves `A X = B` column by column.
    fn solve(&self, b: &DMatrix<f64>, tally: &mut FlopTally) -> DMatrix<f64> {
        let n = self.lu.nrows();
        let mut x = b.select_rows(&self.perm);
        for c in 0..x.ncols() {
            for i in 0..n {
                let mut acc = x[(i, c)];
                for j in 0..i {
                    acc -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = x[(i, c)];
                for j in (i + 1)..n {
                    acc -= self.lu[(i, j)] * x[(j, c)];
                }
                x[(i, c)] = acc / self.lu[(i, i)];
            }
        }
        // forward: n(n−1), backward: n(n−1) plus n divisions, per column
        tally.charge_scalar(Bucket::Matrix, x.ncols() * 2 * n * n.saturating_sub(1), x.ncols() * n);
        x
    }
}

/// Product that charges `rows·cols·(2·inner − 1)` to the matrix bucket.
fn mul(tally: &mut FlopTally, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    tally.charge(
        Bucket::Matrix,
        MatrixOp::Multiply {
            rows: a.nrows(),
            inner: a.ncols(),
            cols: b.ncols(),
        },
    );
    a * b
}

fn mul_vec(tally: &mut FlopTally, a: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    tally.charge(
        Bucket::Matrix,
        MatrixOp::Multiply {
            rows: a.nrows(),
            inner: a.ncols(),
            cols: 1,
        },
    );
    a * v
}

fn check_active(qp: &CondensedQp, active: &ActiveSet) -> Result<(), RegionError> {
    if active.q() != qp.q() {
        return Err(RegionError::Shape("active set size does not match q"));
    }
    Ok(())
}

enum Multiplier<'a> {
    Invert(BackendKind),
    Given(&'a DMatrix<f64>),
}

/// Builds the law and region of `active` from scratch (encoding A1).
pub fn build_region(
    qp: &CondensedQp,
    active: &ActiveSet,
    backend: BackendKind,
) -> Result<RegionBuild, RegionError> {
    build(qp, active, Multiplier::Invert(backend), FlopTally::new())
}

/// Builds the law and region when `Φ` is supplied (encoding A2).
pub fn build_region_with_phi(
    qp: &CondensedQp,
    active: &ActiveSet,
    phi: &DMatrix<f64>,
) -> Result<RegionBuild, RegionError> {
    if phi.shape() != (active.len(), active.len()) {
        return Err(RegionError::Shape("Φ does not match the active set"));
    }
    build(qp, active, Multiplier::Given(phi), FlopTally::new())
}

/// Recovers the active set from `U*` at state `x` and builds its region
/// (encoding A3). Row `i` is active when `(GU* − Ex − w)_i ≥ −1e-7`.
pub fn build_region_from_input(
    qp: &CondensedQp,
    u_star: &DVector<f64>,
    x: &DVector<f64>,
    backend: BackendKind,
) -> Result<RegionBuild, RegionError> {
    build_region_from_rounded_input(qp, u_star, x, backend, 0.0)
}

/// As [`build_region_from_input`] for a `U*` whose entries may each be off
/// by up to `input_error`: row `i` counts as active when its residual is
/// within `1e-7 + ‖G_i‖₁·input_error` of zero. The widening is not charged
/// to the flop tally; the row norms are constants of the problem.
pub fn build_region_from_rounded_input(
    qp: &CondensedQp,
    u_star: &DVector<f64>,
    x: &DVector<f64>,
    backend: BackendKind,
    input_error: f64,
) -> Result<RegionBuild, RegionError> {
    if u_star.len() != qp.dims.decision_len() || x.len() != qp.n() {
        return Err(RegionError::Shape("U* or x has the wrong length"));
    }
    let mut tally = FlopTally::new();
    let gu = mul_vec(&mut tally, &qp.g, u_star);
    let ex = mul_vec(&mut tally, &qp.e, x);
    let q = qp.q();
    tally.charge(Bucket::Matrix, MatrixOp::Add { rows: q, cols: 1 });
    tally.charge(Bucket::Matrix, MatrixOp::Add { rows: q, cols: 1 });
    let residual = gu - ex - &qp.w;
    let flags: Vec<bool> = residual
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let slack = if input_error > 0.0 {
                qp.g.row(i).iter().map(|g| g.abs()).sum::<f64>() * input_error
            } else {
                0.0
            };
            r >= -(ACTIVE_TOLERANCE + slack)
        })
        .collect();
    let active = ActiveSet::from_flags(&flags);
    build(qp, &active, Multiplier::Invert(backend), tally)
}

fn build(
    qp: &CondensedQp,
    active: &ActiveSet,
    multiplier: Multiplier<'_>,
    mut tally: FlopTally,
) -> Result<RegionBuild, RegionError> {
    check_active(qp, active)?;
    let m = qp.m();
    let a_idx = active.indices();
    let i_idx = active.complement();

    // Y = H⁻¹ G_A'
    let g_a = qp.g.select_rows(a_idx);
    let y = mul(&mut tally, &qp.h_inv, &g_a.transpose());
    // W_I (and W_A unless Φ is given)
    let w_i = match multiplier {
        Multiplier::Given(_) => mul(&mut tally, &qp.g.select_rows(&i_idx), &y),
        Multiplier::Invert(_) => {
            let w = mul(&mut tally, &qp.g, &y);
            w.select_rows(&i_idx)
        }
    };
    // (H⁻¹F')_M = (H⁻¹)_M F'
    let h_inv_m = qp.h_inv.rows(0, m).into_owned();
    let hf = mul(&mut tally, &h_inv_m, &qp.f.transpose());

    let s_a = qp.s.select_rows(a_idx);
    let w_a_vec = qp.w.select_rows(a_idx);
    let (z_mat, z_vec, phi) = match multiplier {
        Multiplier::Given(phi) => {
            let z_mat = mul(&mut tally, phi, &s_a);
            let z_vec = mul_vec(&mut tally, phi, &w_a_vec);
            (z_mat, z_vec, Some(phi.clone()))
        }
        Multiplier::Invert(BackendKind::NaiveInverse) => {
            let w_a = active_gram_from(&y, &qp.g, a_idx);
            let phi = gauss_jordan_inverse(&w_a)?;
            tally.charge(Bucket::Inversion, MatrixOp::Inverse { n: a_idx.len() });
            let z_mat = mul(&mut tally, &phi, &s_a);
            let z_vec = mul_vec(&mut tally, &phi, &w_a_vec);
            (z_mat, z_vec, Some(phi))
        }
        Multiplier::Invert(BackendKind::LuPivoted) => {
            let w_a = active_gram_from(&y, &qp.g, a_idx);
            let lu = Lu::factor(&w_a, &mut tally)?;
            let mut rhs = DMatrix::<f64>::zeros(a_idx.len(), qp.n() + 1);
            rhs.columns_mut(0, qp.n()).copy_from(&s_a);
            rhs.set_column(qp.n(), &w_a_vec);
            let sol = lu.solve(&rhs, &mut tally);
            (sol.columns(0, qp.n()).into_owned(), sol.column(qp.n()).into_owned(), None)
        }
    };

    let wz = mul(&mut tally, &w_i, &z_mat);
    let wz_vec = mul_vec(&mut tally, &w_i, &z_vec);
    let y_m = y.rows(0, m).into_owned();
    let ymz = mul(&mut tally, &y_m, &z_mat);
    let offset = mul_vec(&mut tally, &y_m, &z_vec);

    let n_inactive = i_idx.len();
    tally.charge(Bucket::Matrix, MatrixOp::Add { rows: n_inactive, cols: qp.n() });
    tally.charge(Bucket::Matrix, MatrixOp::Add { rows: n_inactive, cols: 1 });
    tally.charge(Bucket::Matrix, MatrixOp::Add { rows: m, cols: qp.n() });
    let t_i = wz - qp.s.select_rows(&i_idx);
    let d_i = qp.w.select_rows(&i_idx) - wz_vec;
    let gain = ymz - hf;

    let q = qp.q();
    let mut t = DMatrix::<f64>::zeros(q, qp.n());
    let mut d = DVector::<f64>::zeros(q);
    t.rows_mut(0, n_inactive).copy_from(&t_i);
    d.rows_mut(0, n_inactive).copy_from(&d_i);
    t.rows_mut(n_inactive, a_idx.len()).copy_from(&z_mat);
    d.rows_mut(n_inactive, a_idx.len()).copy_from(&(-z_vec));

    Ok(RegionBuild {
        region: Region {
            gain,
            offset,
            t,
            d,
            active: Some(active.clone()),
        },
        phi,
        flops: tally,
    })
}

/// Rows `A` of `W = G Y`, recomputed without charging: the full product was
/// already paid for.
fn active_gram_from(y: &DMatrix<f64>, g: &DMatrix<f64>, a_idx: &[usize]) -> DMatrix<f64> {
    g.select_rows(a_idx) * y
}
