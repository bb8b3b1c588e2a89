//! Dense dual active-set solver for the condensed QP.
//!
//! Works on the dual in the space of constraint rows: starting from the
//! unconstrained minimizer, the most violated row is added and the
//! multipliers of the current working set are shifted along the direction
//! that keeps their rows tight, dropping a row whenever its multiplier would
//! go negative. The dual objective never decreases. The working-set Gram
//! matrix `G_A H⁻¹ G_A'` is held as a Cholesky factor that grows by one row
//! per added constraint and is refactored after a drop.

// Tests are written as `!(a <= b)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use alloc::vec::Vec;

use nalgebra::DVector;
use thiserror::Error;

use crate::problem::CondensedQp;
use crate::region::ActiveSet;

/// Multipliers at or below this value are dropped from the reported active set.
pub const MULTIPLIER_TOLERANCE: f64 = 1e-9;
/// A row is violated when its slack is below `−1e-9 (1 + |w_i|)`.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// Relative size of the new Cholesky pivot below which a row is treated as
/// linearly dependent on the working set.
pub const DEPENDENCE_TOLERANCE: f64 = 1e-10;
/// Multipliers beyond `1e12 (1 + ‖w + Sx‖∞) / min_i (GH⁻¹G')_ii` are taken
/// as the dual running off to infinity, i.e. an infeasible QP that rounding
/// kept from showing up as an exactly dependent row.
pub const MULTIPLIER_LIMIT: f64 = 1e12;
/// The returned `U` must satisfy every row to `1e-6 (1 + |w_i|)`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP is infeasible at this state")]
    Infeasible,
    #[error("working set became linearly dependent")]
    DegenerateActiveSet,
    #[error("no convergence after {iterations} iterations")]
    IterationLimit { iterations: usize },
    #[error("state has length {got}, expected {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    /// Rows with a positive multiplier.
    pub active: ActiveSet,
    /// One entry per constraint row, zero off the active set.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QpOptions {
    /// Initial working set; ignored unless its multipliers come out
    /// nonnegative.
    pub warm_start: Option<ActiveSet>,
    /// Defaults to `20 (q + mN) + 100`.
    pub max_iterations: Option<usize>,
}

pub fn solve(qp: &CondensedQp, x: &DVector<f64>) -> Result<QpSolution, QpError> {
    solve_with(qp, x, &QpOptions::default())
}

/// Rows with `(GU − Ex − w)_i ≥ −eps`.
pub fn identify_active_set(qp: &CondensedQp, u: &DVector<f64>, x: &DVector<f64>, eps: f64) -> ActiveSet {
    let residual = qp.constraint_residual(u, x);
    let flags: Vec<bool> = residual.iter().map(|&r| r >= -eps).collect();
    ActiveSet::from_flags(&flags)
}

/// Lower-triangular Cholesky factor of the working-set Gram matrix, one
/// `Vec` per row.
#[derive(Default)]
struct Factor {
    rows: Vec<Vec<f64>>,
}

impl Factor {
    fn rebuild(qp: &CondensedQp, set: &[usize]) -> Option<Self> {
        let mut factor = Factor::default();
        for (k, &p) in set.iter().enumerate() {
            let col: Vec<f64> = set[..k].iter().map(|&j| qp.gram[(j, p)]).collect();
            let l = factor.forward(&col);
            let v = qp.gram[(p, p)] - l.iter().map(|x| x * x).sum::<f64>();
            if !(v > DEPENDENCE_TOLERANCE * qp.gram[(p, p)]) {
                return None;
            }
            factor.push(l, libm::sqrt(v));
        }
        Some(factor)
    }

    fn push(&mut self, mut l: Vec<f64>, diag: f64) {
        l.push(diag);
        self.rows.push(l);
    }

    /// Solves `L y = b`.
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(b.len());
        for (i, row) in self.rows.iter().enumerate() {
            let acc = b[i] - row[..i].iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
            y.push(acc / row[i]);
        }
        y
    }

    /// Solves `L' x = y`.
    fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.rows[i][i];
            let xi = x[i];
            for (j, xj) in x.iter_mut().enumerate().take(i) {
                *xj -= self.rows[i][j] * xi;
            }
        }
        x
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }
}

struct Working<'a> {
    qp: &'a CondensedQp,
    s0: Vec<f64>,
    set: Vec<usize>,
    lambda: Vec<f64>,
    factor: Factor,
    slack: Vec<f64>,
}

impl Working<'_> {
    /// Multipliers that make every working row tight, `λ_A = −M⁻¹ s0_A`,
    /// followed by the slacks they induce.
    fn refresh(&mut self) {
        let rhs: Vec<f64> = self.set.iter().map(|&i| -self.s0[i]).collect();
        self.lambda = self.factor.solve(&rhs).into_iter().map(|l| l.max(0.0)).collect();
        self.recompute_slack();
    }

    fn recompute_slack(&mut self) {
        self.slack.clone_from(&self.s0);
        for (&j, &lj) in self.set.iter().zip(&self.lambda) {
            if lj != 0.0 {
                for (i, s) in self.slack.iter_mut().enumerate() {
                    *s += self.qp.gram[(i, j)] * lj;
                }
            }
        }
    }

    fn most_violated(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in self.slack.iter().enumerate() {
            if s >= -FEASIBILITY_TOLERANCE * (1.0 + self.qp.w[i].abs()) || self.set.contains(&i) {
                continue;
            }
            let scale = libm::sqrt(self.qp.gram[(i, i)]).max(1e-300);
            let score = s / scale;
            if best.map_or(true, |(_, b)| score < b) {
                best = Some((i, score));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn solve_with(qp: &CondensedQp, x: &DVector<f64>, options: &QpOptions) -> Result<QpSolution, QpError> {
    if x.len() != qp.n() {
        return Err(QpError::Shape {
            expected: qp.n(),
            got: x.len(),
        });
    }
    let q = qp.q();
    let limit = options
        .max_iterations
        .unwrap_or(20 * (q + qp.dims.decision_len()) + 100);
    let s0: Vec<f64> = (&qp.w + &qp.s * x).iter().copied().collect();
    let min_diag = (0..q)
        .map(|i| qp.gram[(i, i)])
        .filter(|&g| g > 0.0)
        .fold(f64::INFINITY, f64::min);
    let s0_norm = s0.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let lambda_cap = MULTIPLIER_LIMIT * (1.0 + s0_norm) / min_diag;
    let mut work = Working {
        qp,
        slack: s0.clone(),
        s0,
        set: Vec::new(),
        lambda: Vec::new(),
        factor: Factor::default(),
    };
    if let Some(warm) = &options.warm_start {
        if warm.q() == q {
            if let Some(factor) = Factor::rebuild(qp, warm.indices()) {
                let rhs: Vec<f64> = warm.indices().iter().map(|&i| -work.s0[i]).collect();
                let lambda = factor.solve(&rhs);
                if lambda.iter().all(|&l| l >= 0.0) {
                    work.set = warm.indices().to_vec();
                    work.factor = factor;
                    work.refresh();
                }
            }
        }
    }

    let mut iterations = 0usize;
    while let Some(p) = work.most_violated() {
        let gpp = qp.gram[(p, p)];
        if !(gpp > 0.0) {
            // the row does not involve U at all
            return Err(QpError::Infeasible);
        }
        let mut lambda_p = 0.0;
        loop {
            iterations += 1;
            if iterations > limit {
                return Err(QpError::IterationLimit { iterations: limit });
            }
            let col: Vec<f64> = work.set.iter().map(|&j| qp.gram[(j, p)]).collect();
            let l = work.factor.forward(&col);
            let v = gpp - l.iter().map(|x| x * x).sum::<f64>();
            let r = work.factor.backward(&l);
            let dependent = !(v > DEPENDENCE_TOLERANCE * gpp);

            let full = if dependent { f64::INFINITY } else { -work.slack[p] / v };
            let mut partial = f64::INFINITY;
            let mut blocking = None;
            for (k, (&rk, &lk)) in r.iter().zip(&work.lambda).enumerate() {
                if rk > 1e-12 {
                    let ratio = lk / rk;
                    if ratio < partial {
                        partial = ratio;
                        blocking = Some(k);
                    }
                }
            }
            if !full.is_finite() && blocking.is_none() {
                return Err(QpError::Infeasible);
            }
            let t = full.min(partial).max(0.0);
            for (lk, rk) in work.lambda.iter_mut().zip(&r) {
                *lk -= t * rk;
            }
            lambda_p += t;
            if !(lambda_p <= lambda_cap) || work.lambda.iter().any(|&l| !(l <= lambda_cap)) {
                return Err(QpError::Infeasible);
            }

            if full <= partial {
                work.set.push(p);
                work.lambda.push(lambda_p);
                work.factor.push(l, libm::sqrt(v));
                work.refresh();
                break;
            }
            let k = blocking.expect("partial step has a blocking row");
            work.set.remove(k);
            work.lambda.remove(k);
            work.factor = Factor::rebuild(qp, &work.set).ok_or(QpError::DegenerateActiveSet)?;
            // slack of p with the current multipliers, p still outside the set
            work.recompute_slack();
            for (i, s) in work.slack.iter_mut().enumerate() {
                *s += qp.gram[(i, p)] * lambda_p;
            }
        }
    }

    finish(qp, x, work, iterations)
}

fn finish(qp: &CondensedQp, x: &DVector<f64>, work: Working<'_>, iterations: usize) -> Result<QpSolution, QpError> {
    let q = qp.q();
    let mut multipliers = DVector::<f64>::zeros(q);
    let mut kept = Vec::new();
    for (&j, &lj) in work.set.iter().zip(&work.lambda) {
        if lj > MULTIPLIER_TOLERANCE {
            multipliers[j] = lj;
            kept.push(j);
        }
    }
    let mut u_star = qp.unconstrained_minimizer(x);
    for &j in &kept {
        u_star.axpy(-multipliers[j], &qp.h_inv_gt.column(j), 1.0);
    }
    let residual = qp.constraint_residual(&u_star, x);
    if residual
        .iter()
        .zip(qp.w.iter())
        .any(|(r, w)| !(*r <= RESIDUAL_TOLERANCE * (1.0 + w.abs())))
    {
        return Err(QpError::Infeasible);
    }
    let active = ActiveSet::new(q, kept).expect("working rows are in range");
    Ok(QpSolution {
        objective: qp.objective(&u_star, x),
        u_star,
        active,
        multipliers,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::double_integrator;
    use crate::problem::condense;
    use alloc::vec;
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn scalar_box() -> CondensedQp {
        // min ½u² + xu  s.t.  −1 ≤ u ≤ 1
        CondensedQp::from_parts(
            dmatrix![1.0],
            dmatrix![1.0],
            dmatrix![1.0; -1.0],
            DMatrix::zeros(2, 1),
            dvector![1.0, 1.0],
            1,
            1,
            1,
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_interior() {
        let qp = scalar_box();
        let sol = solve(&qp, &dvector![0.5]).unwrap();
        assert!((sol.u_star[0] + 0.5).abs() < 1e-14);
        assert!(sol.active.is_empty());
        assert_eq!(sol.multipliers, DVector::zeros(2));
    }

    #[test]
    fn clipped_at_bound() {
        let qp = scalar_box();
        let sol = solve(&qp, &dvector![3.0]).unwrap();
        assert!((sol.u_star[0] + 1.0).abs() < 1e-14);
        assert_eq!(sol.active.indices(), &[1]);
        // stationarity u + x − λ = 0
        assert!((sol.multipliers[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_bounds() {
        // u ≤ −1 and −u ≤ −1
        let qp = CondensedQp::from_parts(
            dmatrix![1.0],
            dmatrix![0.0],
            dmatrix![1.0; -1.0],
            DMatrix::zeros(2, 1),
            dvector![-1.0, -1.0],
            1,
            1,
            1,
        )
        .unwrap();
        assert_eq!(solve(&qp, &dvector![0.0]), Err(QpError::Infeasible));
    }

    #[test]
    fn state_only_row_violated_is_infeasible() {
        let qp = condense(&double_integrator()).unwrap();
        assert_eq!(solve(&qp, &dvector![11.0, 0.0]), Err(QpError::Infeasible));
    }

    #[test]
    fn origin_has_empty_active_set() {
        let qp = condense(&double_integrator()).unwrap();
        let sol = solve(&qp, &dvector![0.0, 0.0]).unwrap();
        assert!(sol.active.is_empty());
        assert!(sol.u_star.amax() < 1e-14);
    }

    #[test]
    fn kkt_conditions_hold() {
        let qp = condense(&double_integrator()).unwrap();
        for x in [dvector![5.0, -2.0], dvector![-9.0, 4.0], dvector![2.0, 3.0]] {
            let sol = solve(&qp, &x).unwrap();
            let grad = &qp.h * &sol.u_star + qp.f.transpose() * &x + qp.g.transpose() * &sol.multipliers;
            assert!(grad.amax() < 1e-8, "{grad}");
            let res = qp.constraint_residual(&sol.u_star, &x);
            assert!(res.max() < 1e-8);
            for i in 0..qp.q() {
                assert!(sol.multipliers[i] >= 0.0);
                assert!((sol.multipliers[i] * res[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn warm_start_reaches_same_point() {
        let qp = condense(&double_integrator()).unwrap();
        let x = dvector![-9.0, 4.0];
        let cold = solve(&qp, &x).unwrap();
        let options = QpOptions {
            warm_start: Some(cold.active.clone()),
            max_iterations: None,
        };
        let warm = solve_with(&qp, &x, &options).unwrap();
        assert!((&warm.u_star - &cold.u_star).amax() < 1e-10);
        assert!(warm.iterations <= 1);
    }

    #[test]
    fn identify_uses_closed_threshold() {
        let qp = scalar_box();
        let x = dvector![0.0];
        assert_eq!(identify_active_set(&qp, &dvector![1.0], &x, 0.0).indices(), &[0]);
        assert!(identify_active_set(&qp, &dvector![0.9], &x, 1e-7).is_empty());
    }
}
