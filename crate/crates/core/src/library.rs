//! Bundled example problems.

use alloc::vec;

use nalgebra::{dmatrix, DMatrix, DVector};

use crate::problem::{discretize_zoh, MpcProblem};

/// Sampling time of the four-mass oscillator, in seconds.
pub const FOUR_MASS_SAMPLING_TIME: f64 = 0.5;

/// Continuous-time model of four unit masses coupled by unit springs, no
/// damping, with three tension inputs. States 1–4 are positions, 5–8 velocities.
pub fn four_mass_continuous() -> (DMatrix<f64>, DMatrix<f64>) {
    let coupling = dmatrix![
        2.0, -1.0, 0.0, 0.0;
        -1.0, 2.0, -1.0, 0.0;
        0.0, -1.0, 2.0, -1.0;
        0.0, 0.0, -1.0, 2.0
    ];
    let input_map = dmatrix![
        1.0, 0.0, 1.0;
        0.0, 1.0, 0.0;
        -1.0, 0.0, 0.0;
        0.0, -1.0, -1.0
    ];
    let mut a = DMatrix::<f64>::zeros(8, 8);
    a.view_mut((0, 4), (4, 4)).copy_from(&DMatrix::identity(4, 4));
    a.view_mut((4, 0), (4, 4)).copy_from(&(-coupling));
    let mut b = DMatrix::<f64>::zeros(8, 3);
    b.view_mut((4, 0), (4, 3)).copy_from(&input_map);
    (a, b)
}

/// The four-mass oscillator: ZOH at 0.5 s, states in [−4, 4], inputs in
/// [−0.5, 0.5], `Q = I`, `R = I`, `P` from the DARE, horizon 10.
pub fn four_mass_oscillator() -> MpcProblem {
    let (ac, bc) = four_mass_continuous();
    let (a, b) = discretize_zoh(&ac, &bc, FOUR_MASS_SAMPLING_TIME).expect("valid sampling time");
    MpcProblem {
        a,
        b,
        q: DMatrix::identity(8, 8),
        r: DMatrix::identity(3, 3),
        p: None,
        horizon: 10,
        x_lo: DVector::from_element(8, -4.0),
        x_hi: DVector::from_element(8, 4.0),
        u_lo: DVector::from_element(3, -0.5),
        u_hi: DVector::from_element(3, 0.5),
        t_lo: None,
        t_hi: None,
    }
}

/// Discrete double integrator (unit sampling time): position in [−10, 10],
/// velocity in [−5, 5], input in [−1, 1], `Q = I`, `R = 1`, `P` from the
/// DARE, horizon 5. Used for closed-loop equivalence tests only.
pub fn double_integrator() -> MpcProblem {
    MpcProblem {
        a: dmatrix![1.0, 1.0; 0.0, 1.0],
        b: dmatrix![0.5; 1.0],
        q: DMatrix::identity(2, 2),
        r: DMatrix::identity(1, 1),
        p: None,
        horizon: 5,
        x_lo: DVector::from_column_slice(&[-10.0, -5.0]),
        x_hi: DVector::from_column_slice(&[10.0, 5.0]),
        u_lo: DVector::from_element(1, -1.0),
        u_hi: DVector::from_element(1, 1.0),
        t_lo: None,
        t_hi: None,
    }
}
