mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use common::{condensed, enumerate_optimum, random_polytopic, random_scalar_box, Draw};
use etmpc_core::qp::{self, QpError};

fn check_against_oracle(qp: &etmpc_core::problem::CondensedQp, x: &DVector<f64>) -> Result<(), TestCaseError> {
    match (qp::solve(qp, x), enumerate_optimum(qp, x)) {
        (Ok(sol), Some(u)) => {
            let gap = (&sol.u_star - &u).amax();
            prop_assert!(gap <= 1e-7, "solver and enumeration differ by {gap:e}");
        }
        (Err(QpError::Infeasible), None) => {}
        (got, want) => {
            return Err(TestCaseError::fail(format!("solver {got:?} but enumeration {want:?}")));
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn scalar_box_problems_match_enumeration(values in prop::collection::vec(0.0f64..1.0, 12), xs in -1.2f64..1.2) {
        let mut d = Draw::new(&values);
        let problem = random_scalar_box(&mut d);
        let qp = condensed(&problem);
        prop_assert!(qp.q() <= 12);
        let x = DVector::from_element(1, xs * problem.x_hi[0]);
        check_against_oracle(&qp, &x)?;
    }

    #[test]
    fn polytopic_problems_match_enumeration(
        values in prop::collection::vec(0.0f64..1.0, 64),
        q in 3usize..=12,
        x in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let mut d = Draw::new(&values);
        let qp = random_polytopic(&mut d, 2, 1, 3, q);
        check_against_oracle(&qp, &DVector::from_vec(x))?;
    }

    #[test]
    fn solutions_satisfy_kkt(values in prop::collection::vec(0.0f64..1.0, 64), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let mut d = Draw::new(&values);
        let qp = random_polytopic(&mut d, 2, 2, 2, 10);
        let x = DVector::from_vec(x);
        if let Ok(sol) = qp::solve(&qp, &x) {
            let grad = &qp.h * &sol.u_star + qp.f.transpose() * &x + qp.g.transpose() * &sol.multipliers;
            prop_assert!(grad.amax() <= 1e-8 * (1.0 + sol.multipliers.amax()));
            // residuals are only as accurate as the rounding of G U at the solution's scale
            let scale = 1.0 + sol.u_star.amax() + x.amax();
            let residual = qp.constraint_residual(&sol.u_star, &x);
            for i in 0..qp.q() {
                prop_assert!(sol.multipliers[i] >= 0.0);
                prop_assert!(residual[i] <= 1e-10 * scale);
                prop_assert!((sol.multipliers[i] * residual[i]).abs() <= 1e-10 * scale * (1.0 + sol.multipliers[i]));
            }
            prop_assert!((sol.objective - qp.objective(&sol.u_star, &x)).abs() <= 1e-12 * (1.0 + sol.objective.abs()));
        }
    }

    #[test]
    fn active_rows_are_tight(values in prop::collection::vec(0.0f64..1.0, 64), x in prop::collection::vec(-3.0f64..3.0, 2)) {
        let mut d = Draw::new(&values);
        let qp = random_polytopic(&mut d, 2, 1, 3, 8);
        let x = DVector::from_vec(x);
        if let Ok(sol) = qp::solve(&qp, &x) {
            let tight = qp::identify_active_set(&qp, &sol.u_star, &x, 1e-7);
            for &i in sol.active.indices() {
                prop_assert!(tight.contains(i));
            }
        }
    }
}

#[test]
fn iteration_limit_is_reported() {
    let mut d = Draw::new(&[0.3, 0.7, 0.1, 0.9, 0.5]);
    let qp = random_polytopic(&mut d, 2, 1, 3, 8);
    let options = qp::QpOptions {
        warm_start: None,
        max_iterations: Some(0),
    };
    let far = DVector::from_vec(vec![40.0, -40.0]);
    assert_eq!(
        qp::solve_with(&qp, &far, &options),
        Err(QpError::IterationLimit { iterations: 0 })
    );
}
