#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

use etmpc_core::problem::{condense, CondensedQp, MpcProblem};

/// Minimizer of the QP found by trying every active subset of at most `mN`
/// rows: solve the equality-constrained KKT system and keep the first
/// solution that is primal feasible with nonnegative multipliers.
/// `None` when no subset qualifies, i.e. the QP is infeasible.
pub fn enumerate_optimum(qp: &CondensedQp, x: &DVector<f64>) -> Option<DVector<f64>> {
    let nu = qp.h.nrows();
    let q = qp.g.nrows();
    assert!(q <= 16, "enumeration oracle is exponential in q");
    let rhs_u = -(qp.f.transpose() * x);
    let bound = &qp.w + &qp.e * x;
    for mask in 0u32..(1 << q) {
        let rows: Vec<usize> = (0..q).filter(|i| mask & (1 << i) != 0).collect();
        let k = rows.len();
        if k > nu {
            continue;
        }
        let mut kkt = DMatrix::<f64>::zeros(nu + k, nu + k);
        kkt.view_mut((0, 0), (nu, nu)).copy_from(&qp.h);
        let mut rhs = DVector::<f64>::zeros(nu + k);
        rhs.rows_mut(0, nu).copy_from(&rhs_u);
        for (j, &r) in rows.iter().enumerate() {
            for c in 0..nu {
                kkt[(nu + j, c)] = qp.g[(r, c)];
                kkt[(c, nu + j)] = qp.g[(r, c)];
            }
            rhs[nu + j] = bound[r];
        }
        let svd = kkt.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() <= 1e-11 * smax.max(1.0) {
            continue;
        }
        let Ok(sol) = svd.solve(&rhs, 0.0) else { continue };
        let u = sol.rows(0, nu).into_owned();
        let lambda = sol.rows(nu, k);
        if lambda.iter().any(|&l| l < -1e-9) {
            continue;
        }
        let residual = &qp.g * &u - &bound;
        if residual.iter().all(|&r| r <= 1e-9) {
            return Some(u);
        }
    }
    None
}

/// Deterministic source of uniform numbers for building random instances.
pub struct Draw<'a> {
    values: &'a [f64],
    at: usize,
}

impl<'a> Draw<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        Self { values, at: 0 }
    }

    /// Next value mapped from [0, 1) to [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let v = self.values[self.at % self.values.len()];
        self.at += 1;
        lo + (hi - lo) * v
    }

    pub fn matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| self.uniform(lo, hi))
    }
}

/// Scalar plant, one input, horizon 2: ten constraint rows.
pub fn random_scalar_box(d: &mut Draw) -> MpcProblem {
    let xb = d.uniform(1.0, 5.0);
    let ub = d.uniform(0.2, 2.0);
    let tb = xb * d.uniform(0.3, 1.0);
    MpcProblem {
        a: DMatrix::from_element(1, 1, d.uniform(-1.5, 1.5)),
        b: DMatrix::from_element(1, 1, d.uniform(0.2, 2.0)),
        q: DMatrix::from_element(1, 1, d.uniform(0.1, 5.0)),
        r: DMatrix::from_element(1, 1, d.uniform(0.1, 5.0)),
        p: None,
        horizon: 2,
        x_lo: DVector::from_element(1, -xb),
        x_hi: DVector::from_element(1, xb),
        u_lo: DVector::from_element(1, -ub),
        u_hi: DVector::from_element(1, ub),
        t_lo: Some(DVector::from_element(1, -tb)),
        t_hi: Some(DVector::from_element(1, tb)),
    }
}

/// Random strictly convex QP with general polytopic rows and `0` strictly
/// feasible at `x = 0`.
pub fn random_polytopic(d: &mut Draw, n: usize, m: usize, horizon: usize, q: usize) -> CondensedQp {
    let nu = m * horizon;
    let root = d.matrix(nu, nu, -1.0, 1.0);
    let h = &root * root.transpose() + DMatrix::identity(nu, nu) * 0.5;
    let f = d.matrix(n, nu, -1.0, 1.0);
    let g = d.matrix(q, nu, -1.0, 1.0);
    let e = d.matrix(q, n, -1.0, 1.0);
    let w = DVector::from_fn(q, |_, _| d.uniform(0.1, 2.0));
    CondensedQp::from_parts(h, f, g, e, w, n, m, horizon).expect("positive definite Hessian")
}

pub fn condensed(problem: &MpcProblem) -> CondensedQp {
    condense(problem).expect("valid random problem")
}
