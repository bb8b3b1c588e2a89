use std::sync::OnceLock;

use nalgebra::DVector;
use proptest::prelude::*;

use etmpc_core::costmodel::{eta_split, predicted_flops, Dims, Variant};
use etmpc_core::library::{double_integrator, four_mass_oscillator};
use etmpc_core::problem::{condense, CondensedQp, MpcProblem};
use etmpc_core::qp;
use etmpc_core::region::{build_region, build_region_from_input, build_region_with_phi, BackendKind};

struct Fixture {
    problem: MpcProblem,
    qp: CondensedQp,
}

fn fixtures() -> &'static [Fixture; 2] {
    static CELL: OnceLock<[Fixture; 2]> = OnceLock::new();
    CELL.get_or_init(|| {
        [double_integrator(), four_mass_oscillator()].map(|problem| Fixture {
            qp: condense(&problem).unwrap(),
            problem,
        })
    })
}

fn state_in_box(f: &Fixture, unit: &[f64]) -> DVector<f64> {
    let n = f.problem.n();
    DVector::from_fn(n, |i, _| {
        let (lo, hi) = (f.problem.x_lo[i], f.problem.x_hi[i]);
        lo + (hi - lo) * unit[i % unit.len()]
    })
}

fn dims(qp: &CondensedQp, q_active: usize) -> Dims {
    Dims {
        n: qp.n(),
        m: qp.m(),
        horizon: qp.dims.horizon,
        q: qp.q(),
        q_active,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn law_is_optimal_inside_its_region(
        which in 0usize..2,
        unit in prop::collection::vec(0.0f64..1.0, 8),
        dir in prop::collection::vec(-1.0f64..1.0, 8),
        scale in 0.0f64..0.05,
    ) {
        let f = &fixtures()[which];
        let x = state_in_box(f, &unit);
        let Ok(sol) = qp::solve(&f.qp, &x) else { return Ok(()) };
        let Ok(build) = build_region(&f.qp, &sol.active, BackendKind::NaiveInverse) else { return Ok(()) };
        let region = &build.region;
        prop_assert!(region.contains(&x));
        let m = f.qp.m();
        let at_x = region.law(&x);
        prop_assert!((&at_x - sol.u_star.rows(0, m)).amax() <= 1e-7);

        let y = &x + DVector::from_fn(x.len(), |i, _| scale * dir[i] * (f.problem.x_hi[i] - f.problem.x_lo[i]));
        if region.contains(&y) {
            let fresh = qp::solve(&f.qp, &y).expect("points of a region are feasible");
            prop_assert!((region.law(&y) - fresh.u_star.rows(0, m)).amax() <= 1e-7);
        }
    }

    #[test]
    fn region_multipliers_match_the_solver(which in 0usize..2, unit in prop::collection::vec(0.0f64..1.0, 8)) {
        let f = &fixtures()[which];
        let x = state_in_box(f, &unit);
        let Ok(sol) = qp::solve(&f.qp, &x) else { return Ok(()) };
        let Ok(build) = build_region(&f.qp, &sol.active, BackendKind::NaiveInverse) else { return Ok(()) };
        let r = &build.region;
        let qa = sol.active.len();
        let offset = f.qp.q() - qa;
        // the last q_A rows of Tx ≤ d read λ(x) ≥ 0 with λ(x) = d_A − T_A x
        for (k, &row) in sol.active.indices().iter().enumerate() {
            let lambda = r.d[offset + k] - r.t.row(offset + k).dot(&x.transpose());
            let scale = 1.0 + sol.multipliers.amax();
            prop_assert!((lambda - sol.multipliers[row]).abs() <= 1e-7 * scale);
        }
    }

    #[test]
    fn backends_agree(which in 0usize..2, unit in prop::collection::vec(0.0f64..1.0, 8)) {
        let f = &fixtures()[which];
        let x = state_in_box(f, &unit);
        let Ok(sol) = qp::solve(&f.qp, &x) else { return Ok(()) };
        let (Ok(a), Ok(b)) = (
            build_region(&f.qp, &sol.active, BackendKind::NaiveInverse),
            build_region(&f.qp, &sol.active, BackendKind::LuPivoted),
        ) else { return Ok(()) };
        let tol = |v: f64| 1e-8 * (1.0 + v);
        prop_assert!((&a.region.gain - &b.region.gain).amax() <= tol(a.region.gain.amax()));
        prop_assert!((&a.region.offset - &b.region.offset).amax() <= tol(a.region.offset.amax()));
        prop_assert!((&a.region.t - &b.region.t).amax() <= tol(a.region.t.amax()));
        prop_assert!((&a.region.d - &b.region.d).amax() <= tol(a.region.d.amax()));
    }

    #[test]
    fn instrumented_counts_match_the_analytics(which in 0usize..2, unit in prop::collection::vec(0.0f64..1.0, 8)) {
        let f = &fixtures()[which];
        let x = state_in_box(f, &unit);
        let Ok(sol) = qp::solve(&f.qp, &x) else { return Ok(()) };
        let Ok(a1) = build_region(&f.qp, &sol.active, BackendKind::NaiveInverse) else { return Ok(()) };
        let d = dims(&f.qp, sol.active.len());
        prop_assert_eq!(a1.flops.split(), eta_split(d));
        prop_assert_eq!(a1.flops.total(), predicted_flops(Variant::A1, d));
        let a2 = build_region_with_phi(&f.qp, &sol.active, a1.phi.as_ref().unwrap()).unwrap();
        prop_assert_eq!(a2.flops.total(), predicted_flops(Variant::A2, d));
        if let Ok(a3) = build_region_from_input(&f.qp, &sol.u_star, &x, BackendKind::NaiveInverse) {
            let qa3 = a3.region.active.as_ref().unwrap().len();
            prop_assert_eq!(a3.flops.total(), predicted_flops(Variant::A3, dims(&f.qp, qa3)));
        }
    }

    #[test]
    fn optimal_input_is_continuous_along_segments(
        which in 0usize..2,
        a in prop::collection::vec(0.0f64..1.0, 8),
        b in prop::collection::vec(0.0f64..1.0, 8),
    ) {
        let f = &fixtures()[which];
        let (xa, xb) = (state_in_box(f, &a), state_in_box(f, &b));
        let m = f.qp.m();
        let steps = 200;
        let mut previous: Option<(DVector<f64>, DVector<f64>)> = None;
        for s in 0..=steps {
            let x = &xa + (&xb - &xa) * (s as f64 / steps as f64);
            let Ok(sol) = qp::solve(&f.qp, &x) else { previous = None; continue };
            let u = sol.u_star.rows(0, m).into_owned();
            if let Some((px, pu)) = &previous {
                // Lipschitz bound of the explicit law: generous multiple of ‖H⁻¹F'‖
                let lip = 50.0 * (1.0 + f.qp.h_inv.amax() * f.qp.f.amax() * f.qp.h.nrows() as f64);
                prop_assert!((&u - pu).amax() <= lip * (&x - px).amax() + 1e-9);
            }
            previous = Some((x, u));
        }
    }
}

#[test]
fn region_of_the_origin_is_the_unconstrained_law() {
    for f in fixtures() {
        let x = DVector::zeros(f.problem.n());
        let sol = qp::solve(&f.qp, &x).unwrap();
        assert!(sol.active.is_empty());
        let build = build_region(&f.qp, &sol.active, BackendKind::NaiveInverse).unwrap();
        assert_eq!(build.flops.inversion, 0);
        let m = f.qp.m();
        let lqr = -(f.qp.h_inv.rows(0, m) * f.qp.f.transpose());
        assert!((&build.region.gain - lqr).amax() < 1e-12);
    }
}
