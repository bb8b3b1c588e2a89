//! Linear MPC problem definition, validation, terminal-weight Riccati solve,
//! zero-order-hold discretization and condensation into a dense QP
//!
//! ```text
//!     min_U  ½ U'HU + x'FU    s.t.  GU − Ex ≤ w
//! ```
//!
//! with `U = (u(0)', …, u(N−1)')'`.
//!
//! Constraint rows of a box-constrained problem are laid out in a fixed order
//! so that active-set indices mean the same thing on every node:
//!
//! | block | rows | content |
//! |-------|------|---------|
//! | 0 | mN | input upper bounds, stage-major |
//! | 1 | mN | input lower bounds |
//! | 2 | nN | state upper bounds, stages 0..N−1 |
//! | 3 | nN | state lower bounds, stages 0..N−1 |
//! | 4 | n  | terminal upper bounds |
//! | 5 | n  | terminal lower bounds |
//!
//! Stage-0 state rows have a zero `G` row: they only restrict `x(0)` itself.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{inf_norm, is_symmetric, max_abs, numerical_rank, spd_inverse, symmetrize};

/// Iteration cap of the Riccati fixed-point iteration.
pub const DARE_MAX_ITERATIONS: usize = 10_000;
/// Residual tolerance (induced ∞-norm) of the Riccati solution.
pub const DARE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    /// Discrete-time dynamics `x(k+1) = A x(k) + B u(k)`.
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Stage state weight, symmetric positive semidefinite.
    pub q: DMatrix<f64>,
    /// Stage input weight, symmetric positive definite.
    pub r: DMatrix<f64>,
    /// Terminal weight. `None` means "use the DARE solution".
    pub p: Option<DMatrix<f64>>,
    pub horizon: usize,
    pub x_lo: DVector<f64>,
    pub x_hi: DVector<f64>,
    pub u_lo: DVector<f64>,
    pub u_hi: DVector<f64>,
    /// Terminal box; `None` falls back to the state box.
    pub t_lo: Option<DVector<f64>>,
    pub t_hi: Option<DVector<f64>>,
}

impl MpcProblem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn terminal_lo(&self) -> &DVector<f64> {
        self.t_lo.as_ref().unwrap_or(&self.x_lo)
    }

    pub fn terminal_hi(&self) -> &DVector<f64> {
        self.t_hi.as_ref().unwrap_or(&self.x_hi)
    }

    /// Number of rows of the condensed box constraints, `2mN + 2nN + 2n`.
    pub fn constraint_count(&self) -> usize {
        box_constraint_count(self.n(), self.m(), self.horizon)
    }

    /// One step of the nominal plant.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

pub fn box_constraint_count(n: usize, m: usize, horizon: usize) -> usize {
    2 * m * horizon + 2 * n * horizon + 2 * n
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("{matrix} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Shape {
        matrix: &'static str,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{0} contains a non-finite entry")]
    NonFinite(&'static str),
    #[error("horizon must exceed 1 (got {0})")]
    HorizonTooShort(usize),
    #[error("Q must be symmetric positive semidefinite")]
    StateWeight,
    #[error("R must be symmetric positive definite")]
    InputWeight,
    #[error("P must be symmetric positive definite")]
    TerminalWeight,
    #[error("not stabilizable: uncontrollable mode {re:+.6}{im:+.6}i with |λ| ≥ 1")]
    NotStabilizable { re: f64, im: f64 },
    #[error("{0} box must contain the origin in its interior")]
    OriginNotInterior(&'static str),
    #[error("terminal box must lie inside the state box")]
    TerminalOutsideStateBox,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("pass");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

fn check_shape(
    out: &mut Vec<Violation>,
    matrix: &'static str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        out.push(Violation::Shape {
            matrix,
            rows: m.nrows(),
            cols: m.ncols(),
            expected_rows: rows,
            expected_cols: cols,
        });
        return false;
    }
    if m.iter().any(|v| !v.is_finite()) {
        out.push(Violation::NonFinite(matrix));
        return false;
    }
    true
}

fn check_vector(out: &mut Vec<Violation>, name: &'static str, v: &DVector<f64>, len: usize) -> bool {
    if v.len() != len {
        out.push(Violation::Shape {
            matrix: name,
            rows: v.len(),
            cols: 1,
            expected_rows: len,
            expected_cols: 1,
        });
        return false;
    }
    if v.iter().any(|x| !x.is_finite()) {
        out.push(Violation::NonFinite(name));
        return false;
    }
    true
}

/// Minimum eigenvalue of a symmetric matrix, or `None` if it is not symmetric.
fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> Option<f64> {
    if !is_symmetric(m, 1e-12) {
        return None;
    }
    if m.nrows() == 0 {
        return Some(f64::INFINITY);
    }
    let eig = m.clone().symmetric_eigen();
    Some(eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v)))
}

fn is_psd(m: &DMatrix<f64>) -> bool {
    min_symmetric_eigenvalue(m).is_some_and(|l| l >= -1e-12 * (1.0 + max_abs(m)))
}

fn is_pd(m: &DMatrix<f64>) -> bool {
    min_symmetric_eigenvalue(m).is_some_and(|l| l > 1e-12 * (1.0 + max_abs(m)))
}

/// Hautus test restricted to eigenvalues on or outside the unit circle.
///
/// A complex eigenvalue `a + ib` is tested on the real form
/// `[[A − aI, bI, B, 0], [−bI, A − aI, 0, B]]`, which has rank `2n` exactly
/// when `[A − λI, B]` has complex rank `n`.
pub fn uncontrollable_unstable_mode(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<(f64, f64)> {
    let n = a.nrows();
    let m = b.ncols();
    let eigs = a.clone().complex_eigenvalues();
    for lam in eigs.iter() {
        let modulus = libm::hypot(lam.re, lam.im);
        if modulus < 1.0 - 1e-9 {
            continue;
        }
        let shifted = a - DMatrix::<f64>::identity(n, n) * lam.re;
        let rank = if lam.im.abs() <= 1e-12 * (1.0 + modulus) {
            let mut pbh = DMatrix::<f64>::zeros(n, n + m);
            pbh.view_mut((0, 0), (n, n)).copy_from(&shifted);
            pbh.view_mut((0, n), (n, m)).copy_from(b);
            numerical_rank(&pbh, 1e-7) * 2
        } else {
            let mut pbh = DMatrix::<f64>::zeros(2 * n, 2 * n + 2 * m);
            let ib = DMatrix::<f64>::identity(n, n) * lam.im;
            pbh.view_mut((0, 0), (n, n)).copy_from(&shifted);
            pbh.view_mut((0, n), (n, n)).copy_from(&ib);
            pbh.view_mut((n, 0), (n, n)).copy_from(&(-&ib));
            pbh.view_mut((n, n), (n, n)).copy_from(&shifted);
            pbh.view_mut((0, 2 * n), (n, m)).copy_from(b);
            pbh.view_mut((n, 2 * n + m), (n, m)).copy_from(b);
            numerical_rank(&pbh, 1e-7)
        };
        if rank < 2 * n {
            return Some((lam.re, lam.im));
        }
    }
    None
}

/// Checks every invariant of [`MpcProblem`] and returns all violations.
pub fn validate(problem: &MpcProblem) -> ValidationReport {
    let mut v = Vec::new();
    let n = problem.a.nrows();
    let m = problem.b.ncols();

    let mut shapes_ok = check_shape(&mut v, "A", &problem.a, n, n);
    shapes_ok &= check_shape(&mut v, "B", &problem.b, n, m);
    shapes_ok &= check_shape(&mut v, "Q", &problem.q, n, n);
    shapes_ok &= check_shape(&mut v, "R", &problem.r, m, m);
    if let Some(p) = &problem.p {
        shapes_ok &= check_shape(&mut v, "P", p, n, n);
    }
    let mut boxes_ok = check_vector(&mut v, "x_lo", &problem.x_lo, n);
    boxes_ok &= check_vector(&mut v, "x_hi", &problem.x_hi, n);
    boxes_ok &= check_vector(&mut v, "u_lo", &problem.u_lo, m);
    boxes_ok &= check_vector(&mut v, "u_hi", &problem.u_hi, m);
    if let Some(t) = &problem.t_lo {
        boxes_ok &= check_vector(&mut v, "t_lo", t, n);
    }
    if let Some(t) = &problem.t_hi {
        boxes_ok &= check_vector(&mut v, "t_hi", t, n);
    }

    if problem.horizon < 2 {
        v.push(Violation::HorizonTooShort(problem.horizon));
    }

    if shapes_ok {
        if !is_psd(&problem.q) {
            v.push(Violation::StateWeight);
        }
        if !is_pd(&problem.r) {
            v.push(Violation::InputWeight);
        }
        if let Some(p) = &problem.p {
            if !is_pd(p) {
                v.push(Violation::TerminalWeight);
            }
        }
        if let Some((re, im)) = uncontrollable_unstable_mode(&problem.a, &problem.b) {
            v.push(Violation::NotStabilizable { re, im });
        }
    }

    if boxes_ok {
        let interior = |lo: &DVector<f64>, hi: &DVector<f64>| {
            lo.iter().zip(hi.iter()).all(|(&l, &h)| l < 0.0 && 0.0 < h)
        };
        if !interior(&problem.x_lo, &problem.x_hi) {
            v.push(Violation::OriginNotInterior("state"));
        }
        if !interior(&problem.u_lo, &problem.u_hi) {
            v.push(Violation::OriginNotInterior("input"));
        }
        let (t_lo, t_hi) = (problem.terminal_lo(), problem.terminal_hi());
        if !interior(t_lo, t_hi) {
            v.push(Violation::OriginNotInterior("terminal"));
        }
        let inside = t_lo.iter().zip(problem.x_lo.iter()).all(|(t, x)| t >= x)
            && t_hi.iter().zip(problem.x_hi.iter()).all(|(t, x)| t <= x);
        if !inside {
            v.push(Violation::TerminalOutsideStateBox);
        }
    }

    ValidationReport { violations: v }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DareError {
    #[error("DARE divergence: residual {residual:e} after {iterations} iterations")]
    Divergence { iterations: usize, residual: f64 },
    #[error("R + B'PB lost positive definiteness during the Riccati iteration")]
    Singular,
    #[error("DARE shape mismatch: {0}")]
    Shape(String),
}

/// Right-hand side of the Riccati recursion, `A'PA − A'PB(R+B'PB)⁻¹B'PA + Q`.
pub fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let pa = p * a;
    let pb = p * b;
    let s = r + b.transpose() * &pb;
    let chol = s.cholesky()?;
    let gain = chol.solve(&(pb.transpose() * a));
    let mut next = a.transpose() * &pa - a.transpose() * &pb * gain + q;
    symmetrize(&mut next);
    Some(next)
}

/// Stabilizing solution of the discrete algebraic Riccati equation by
/// fixed-point iteration of the Riccati recursion, started from `Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, DareError> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(DareError::Shape(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let mut p = q.clone();
    symmetrize(&mut p);
    let mut residual = f64::INFINITY;
    for iteration in 0..DARE_MAX_ITERATIONS {
        let next = riccati_map(a, b, q, r, &p).ok_or(DareError::Singular)?;
        let step = inf_norm(&(&next - &p));
        p = next;
        if step <= DARE_TOLERANCE {
            // the fixed-point step is the residual of the previous iterate;
            // confirm on the accepted one
            let check = riccati_map(a, b, q, r, &p).ok_or(DareError::Singular)?;
            residual = inf_norm(&(&check - &p));
            if residual <= DARE_TOLERANCE {
                return Ok(p);
            }
        }
        if !step.is_finite() {
            return Err(DareError::Divergence {
                iterations: iteration + 1,
                residual: step,
            });
        }
        residual = step;
    }
    Err(DareError::Divergence {
        iterations: DARE_MAX_ITERATIONS,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiscretizeError {
    #[error("sampling time must be positive and finite (got {0})")]
    SamplingTime(f64),
    #[error("continuous-time shapes do not match: A {0:?}, B {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

/// Exact zero-order-hold discretization via the exponential of
/// `[[A, B], [0, 0]]·Ts`.
pub fn discretize_zoh(
    a_cont: &DMatrix<f64>,
    b_cont: &DMatrix<f64>,
    ts: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DiscretizeError> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(DiscretizeError::SamplingTime(ts));
    }
    let n = a_cont.nrows();
    if !a_cont.is_square() || b_cont.nrows() != n {
        return Err(DiscretizeError::Shape(a_cont.shape(), b_cont.shape()));
    }
    let m = b_cont.ncols();
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a_cont * ts));
    aug.view_mut((0, n), (n, m)).copy_from(&(b_cont * ts));
    let e = crate::linalg::expm(&aug);
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// Role of one constraint row in the documented box layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    InputUpper,
    InputLower,
    StateUpper,
    StateLower,
    TerminalUpper,
    TerminalLower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowLabel {
    pub kind: RowKind,
    /// Prediction stage (`N` for terminal rows).
    pub stage: usize,
    pub component: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpDims {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub q: usize,
}

impl QpDims {
    /// Length of the stacked input sequence, `mN`.
    pub fn decision_len(&self) -> usize {
        self.m * self.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CondenseError {
    #[error("invalid problem: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Dare(#[from] DareError),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("Hessian is not positive definite")]
    SingularHessian,
}

/// Dense QP data plus the quantities every node precomputes offline.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedQp {
    pub h: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub w: DVector<f64>,
    /// `S = E + G H⁻¹ F'`.
    pub s: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    pub dims: QpDims,
    /// `H⁻¹F'`, mN×n.
    pub(crate) h_inv_ft: DMatrix<f64>,
    /// `H⁻¹G'`, mN×q.
    pub(crate) h_inv_gt: DMatrix<f64>,
    /// `G H⁻¹ G'`, q×q.
    pub(crate) gram: DMatrix<f64>,
    box_layout: bool,
}

impl CondensedQp {
    /// Builds a QP from arbitrary polytopic data `GU − Ex ≤ w`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        h: DMatrix<f64>,
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        e: DMatrix<f64>,
        w: DVector<f64>,
        n: usize,
        m: usize,
        horizon: usize,
    ) -> Result<Self, CondenseError> {
        Self::assemble(h, f, g, e, w, QpDims { n, m, horizon, q: 0 }, false)
    }

    fn assemble(
        mut h: DMatrix<f64>,
        f: DMatrix<f64>,
        g: DMatrix<f64>,
        e: DMatrix<f64>,
        w: DVector<f64>,
        mut dims: QpDims,
        box_layout: bool,
    ) -> Result<Self, CondenseError> {
        let nu = dims.decision_len();
        let q = g.nrows();
        dims.q = q;
        if h.shape() != (nu, nu)
            || f.shape() != (dims.n, nu)
            || g.ncols() != nu
            || e.shape() != (q, dims.n)
            || w.len() != q
        {
            return Err(CondenseError::Shape(format!(
                "H {:?}, F {:?}, G {:?}, E {:?}, w {} for n={}, mN={}",
                h.shape(),
                f.shape(),
                g.shape(),
                e.shape(),
                w.len(),
                dims.n,
                nu
            )));
        }
        symmetrize(&mut h);
        let h_inv = spd_inverse(&h).ok_or(CondenseError::SingularHessian)?;
        let h_inv_ft = &h_inv * f.transpose();
        let h_inv_gt = &h_inv * g.transpose();
        let s = &e + &g * &h_inv_ft;
        let mut gram = &g * &h_inv_gt;
        symmetrize(&mut gram);
        Ok(Self {
            h,
            f,
            g,
            e,
            w,
            s,
            h_inv,
            dims,
            h_inv_ft,
            h_inv_gt,
            gram,
            box_layout,
        })
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn m(&self) -> usize {
        self.dims.m
    }

    pub fn q(&self) -> usize {
        self.dims.q
    }

    /// `½U'HU + x'FU`.
    pub fn objective(&self, u: &DVector<f64>, x: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + x.dot(&(&self.f * u))
    }

    /// `GU − Ex − w`; nonpositive entries are satisfied rows.
    pub fn constraint_residual(&self, u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        &self.g * u - &self.e * x - &self.w
    }

    /// Unconstrained minimizer `−H⁻¹F'x`.
    pub fn unconstrained_minimizer(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.h_inv_ft * x)
    }

    /// Meaning of row `i` in the documented box layout, when the QP was
    /// produced by [`condense`].
    pub fn row_label(&self, i: usize) -> Option<RowLabel> {
        if !self.box_layout || i >= self.dims.q {
            return None;
        }
        let QpDims { n, m, horizon, .. } = self.dims;
        let blocks = [
            (RowKind::InputUpper, m * horizon, m),
            (RowKind::InputLower, m * horizon, m),
            (RowKind::StateUpper, n * horizon, n),
            (RowKind::StateLower, n * horizon, n),
            (RowKind::TerminalUpper, n, n),
            (RowKind::TerminalLower, n, n),
        ];
        let mut offset = 0;
        for (kind, len, width) in blocks {
            if i < offset + len {
                let local = i - offset;
                let stage = match kind {
                    RowKind::TerminalUpper | RowKind::TerminalLower => horizon,
                    _ => local / width,
                };
                return Some(RowLabel {
                    kind,
                    stage,
                    component: local % width,
                });
            }
            offset += len;
        }
        None
    }

    /// Index of the row with the given label in the box layout.
    pub fn row_index(&self, kind: RowKind, stage: usize, component: usize) -> usize {
        let QpDims { n, m, horizon, .. } = self.dims;
        let mn = m * horizon;
        let nn = n * horizon;
        match kind {
            RowKind::InputUpper => stage * m + component,
            RowKind::InputLower => mn + stage * m + component,
            RowKind::StateUpper => 2 * mn + stage * n + component,
            RowKind::StateLower => 2 * mn + nn + stage * n + component,
            RowKind::TerminalUpper => 2 * mn + 2 * nn + component,
            RowKind::TerminalLower => 2 * mn + 2 * nn + n + component,
        }
    }
}

/// Terminal weight used by [`condense`]: the given `P` or the DARE solution.
pub fn terminal_weight(problem: &MpcProblem) -> Result<DMatrix<f64>, DareError> {
    match &problem.p {
        Some(p) => Ok(p.clone()),
        None => solve_dare(&problem.a, &problem.b, &problem.q, &problem.r),
    }
}

/// Eliminates the states with the prediction matrices and returns the dense QP.
///
/// The QP objective equals the stage-cost sum of the problem minus its value
/// at `U = 0`, which depends on `x` only.
pub fn condense(problem: &MpcProblem) -> Result<CondensedQp, CondenseError> {
    let report = validate(problem);
    if !report.is_ok() {
        return Err(CondenseError::Invalid(report));
    }
    let p = terminal_weight(problem)?;
    let n = problem.n();
    let m = problem.m();
    let horizon = problem.horizon;
    let nu = m * horizon;

    // powers[k] = A^k, gammas[k] maps U to the input part of x(k)
    let mut powers = Vec::with_capacity(horizon + 1);
    let mut gammas = Vec::with_capacity(horizon + 1);
    powers.push(DMatrix::<f64>::identity(n, n));
    gammas.push(DMatrix::<f64>::zeros(n, nu));
    for k in 0..horizon {
        let next_power = &problem.a * &powers[k];
        let mut next_gamma = &problem.a * &gammas[k];
        next_gamma
            .view_mut((0, k * m), (n, m))
            .copy_from(&problem.b);
        powers.push(next_power);
        gammas.push(next_gamma);
    }

    let mut h = DMatrix::<f64>::zeros(nu, nu);
    let mut f = DMatrix::<f64>::zeros(n, nu);
    for k in 1..=horizon {
        let weight = if k == horizon { &p } else { &problem.q };
        let wg = weight * &gammas[k];
        h += gammas[k].transpose() * &wg;
        f += powers[k].transpose() * &wg;
    }
    for k in 0..horizon {
        let mut block = h.view_mut((k * m, k * m), (m, m));
        block += &problem.r;
    }
    h *= 2.0;
    f *= 2.0;

    let q = problem.constraint_count();
    let mut g = DMatrix::<f64>::zeros(q, nu);
    let mut e = DMatrix::<f64>::zeros(q, n);
    let mut w = DVector::<f64>::zeros(q);
    let mut row = 0;
    for sign in [1.0, -1.0] {
        let bound = if sign > 0.0 { &problem.u_hi } else { &problem.u_lo };
        for k in 0..horizon {
            for i in 0..m {
                g[(row, k * m + i)] = sign;
                w[row] = sign * bound[i];
                row += 1;
            }
        }
    }
    for sign in [1.0, -1.0] {
        let bound = if sign > 0.0 { &problem.x_hi } else { &problem.x_lo };
        for k in 0..horizon {
            for i in 0..n {
                g.row_mut(row).copy_from(&(gammas[k].row(i) * sign));
                e.row_mut(row).copy_from(&(powers[k].row(i) * -sign));
                w[row] = sign * bound[i];
                row += 1;
            }
        }
    }
    for sign in [1.0, -1.0] {
        let bound = if sign > 0.0 {
            problem.terminal_hi()
        } else {
            problem.terminal_lo()
        };
        for i in 0..n {
            g.row_mut(row).copy_from(&(gammas[horizon].row(i) * sign));
            e.row_mut(row).copy_from(&(powers[horizon].row(i) * -sign));
            w[row] = sign * bound[i];
            row += 1;
        }
    }
    debug_assert_eq!(row, q);

    CondensedQp::assemble(
        h,
        f,
        g,
        e,
        w,
        QpDims {
            n,
            m,
            horizon,
            q,
        },
        true,
    )
}
