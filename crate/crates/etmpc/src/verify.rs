//! The acceptance checks, runnable offline.
//!
//! The closed-loop criteria (1, 2, 4, 8) share one set of simulations,
//! gathered once into [`ClosedLoopEvidence`]. The rest are independent.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use etmpc_core::costmodel::{
    check_ratio_bound, compare_encodings, eta_split, predicted_bits, predicted_bits_with, predicted_flops, Dims,
    Prediction, Variant,
};
use etmpc_core::library::{double_integrator, four_mass_oscillator};
use etmpc_core::nalgebra::{DMatrix, DVector};
use etmpc_core::problem::{condense, CondensedQp, MpcProblem};
use etmpc_core::protocol::{self, Precision, ProtocolError, WireMessage};
use etmpc_core::qp::{self, QpError};
use etmpc_core::region::{build_region, BackendKind};
use etmpc_core::sim::{
    max_deviation, sample_feasible_states, simulate_classical, simulate_loopback, Plant, SimConfig, StepRecord,
};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::batch::{par_map_states, run_batch_parallel};

pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_SEED: u64 = 7;
pub const DEFAULT_PAIRS: usize = 500;

/// Closed-loop agreement required at full precision.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;
/// Agreement between a regional law and a fresh QP solve.
pub const LAW_TOLERANCE: f64 = 1e-7;
/// Agreement between the solver and exhaustive enumeration.
pub const ENUMERATION_TOLERANCE: f64 = 1e-8;

const GRID_NM: std::ops::RangeInclusive<usize> = 1..=6;
const GRID_HORIZON: std::ops::RangeInclusive<usize> = 2..=12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Reported, not judged.
    Info,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub id: &'static str,
    pub title: &'static str,
    pub status: Status,
    pub detail: String,
}

impl Outcome {
    fn judged(id: &'static str, title: &'static str, passed: bool, detail: String) -> Self {
        Self {
            id,
            title,
            status: if passed { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        };
        write!(f, "{tag} criterion {} ({}): {}", self.id, self.title, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub runs: usize,
    pub seed: u64,
    pub pairs: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            seed: DEFAULT_SEED,
            pairs: DEFAULT_PAIRS,
        }
    }
}

/// A bundled problem with its QP.
pub struct Case {
    pub name: &'static str,
    pub problem: MpcProblem,
    pub plant: Plant,
    pub qp: Arc<CondensedQp>,
}

impl Case {
    pub fn new(name: &'static str, problem: MpcProblem) -> Self {
        let qp = Arc::new(condense(&problem).expect("bundled problems condense"));
        Self {
            name,
            plant: Plant::of(&problem),
            problem,
            qp,
        }
    }

    pub fn bundled() -> Vec<Case> {
        vec![
            Case::new("four_mass_oscillator", four_mass_oscillator()),
            Case::new("double_integrator", double_integrator()),
        ]
    }

    fn dims(&self, q_active: usize) -> Dims {
        Dims::for_box(self.problem.n(), self.problem.m(), self.problem.horizon, q_active)
    }
}

fn first<T: fmt::Display>(items: &[T]) -> String {
    items.first().map_or_else(String::new, |s| format!("; first: {s}"))
}

/// Per-variant findings over the full-precision runs of one problem.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VariantEvidence {
    pub runs: usize,
    pub failures: Vec<String>,
    pub length_mismatches: usize,
    pub max_state_deviation: f64,
    pub max_input_deviation: f64,
    pub events: usize,
    pub fallbacks: usize,
    /// Messages whose length was compared with the formula at 64 bits per real.
    pub messages: usize,
    pub bit_mismatches: Vec<String>,
    /// Messages re-encoded at binary16 and compared with the 16-bit formula.
    pub half_messages: usize,
    pub half_mismatches: Vec<String>,
    /// Messages with an entry beyond the binary16 range.
    pub half_range_errors: usize,
    /// Events whose local flop counters were compared with the formulas.
    pub flop_events: usize,
    pub flop_mismatches: Vec<String>,
    pub q_active_histogram: BTreeMap<usize, usize>,
}

impl VariantEvidence {
    fn merge(&mut self, o: VariantEvidence) {
        self.runs += o.runs;
        self.failures.extend(o.failures);
        self.length_mismatches += o.length_mismatches;
        self.max_state_deviation = self.max_state_deviation.max(o.max_state_deviation);
        self.max_input_deviation = self.max_input_deviation.max(o.max_input_deviation);
        self.events += o.events;
        self.fallbacks += o.fallbacks;
        self.messages += o.messages;
        self.bit_mismatches.extend(o.bit_mismatches);
        self.half_messages += o.half_messages;
        self.half_mismatches.extend(o.half_mismatches);
        self.half_range_errors += o.half_range_errors;
        self.flop_events += o.flop_events;
        self.flop_mismatches.extend(o.flop_mismatches);
        for (k, v) in o.q_active_histogram {
            *self.q_active_histogram.entry(k).or_default() += v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemEvidence {
    pub name: &'static str,
    pub mn: usize,
    pub classical_failures: Vec<String>,
    pub variants: [VariantEvidence; 4],
}

/// Full-precision event-triggered and classical runs of both bundled problems.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopEvidence {
    pub problems: Vec<ProblemEvidence>,
}

/// Re-encodes a full-precision message at binary16.
fn reencode_half(case: &Case, msg: &WireMessage) -> Result<WireMessage, ProtocolError> {
    let d = &case.qp.dims;
    let full = Precision::Full;
    match msg.variant {
        Variant::A1 => Ok(msg.clone()),
        Variant::A2 => {
            let (active, phi) = protocol::decode_a2(&msg.payload, d.q, full)?;
            protocol::encode_a2(&active, &phi, Precision::Half)
        }
        Variant::A3 => {
            let u = protocol::decode_a3(&msg.payload, d.m, d.horizon, full)?;
            protocol::encode_a3(&u, d.m, d.horizon, Precision::Half)
        }
        Variant::A4 => {
            let region = protocol::decode_a4(&msg.payload, d.n, d.m, d.q, full)?;
            protocol::encode_a4(&region, Precision::Half)
        }
    }
}

fn check_event(case: &Case, variant: Variant, run: usize, s: &StepRecord, ev: &mut VariantEvidence) {
    ev.events += 1;
    if let Some(qa) = s.q_active {
        *ev.q_active_histogram.entry(qa).or_default() += 1;
    }
    if s.fallback {
        ev.fallbacks += 1;
        return;
    }
    let Some(msg) = &s.message else { return };
    // only A2 transmits something whose size depends on the active set
    let qa = match variant {
        Variant::A2 => s.q_active.unwrap_or(0),
        _ => 0,
    };
    let dims = case.dims(qa);
    let at = format!("{} {variant} run {run} step {}", case.name, s.k);

    ev.messages += 1;
    let expected = predicted_bits_with(variant, dims, Precision::Full.bits_per_real());
    if msg.bit_length != expected || s.bits != msg.bit_length {
        ev.bit_mismatches.push(format!("{at}: {} bits, formula {expected}", msg.bit_length));
    }
    match reencode_half(case, msg) {
        Ok(half) => {
            ev.half_messages += 1;
            let expected = predicted_bits(variant, dims);
            let bytes = expected.div_ceil(8) as usize;
            if half.bit_length != expected || half.payload.len() != bytes {
                ev.half_mismatches.push(format!(
                    "{at}: {} bits in {} bytes, formula {expected}",
                    half.bit_length,
                    half.payload.len()
                ));
            }
        }
        Err(ProtocolError::Range { .. }) => ev.half_range_errors += 1,
        Err(e) => ev.half_mismatches.push(format!("{at}: {e}")),
    }

    if variant == Variant::A1 {
        let Some(qa) = s.q_active else { return };
        let dims = case.dims(qa);
        ev.flop_events += 1;
        let eta = eta_split(dims);
        let total = predicted_flops(Variant::A1, dims);
        if s.flops_inv != eta.inv || s.flops_mat != eta.mat || s.flops_inv + s.flops_mat != total {
            ev.flop_mismatches.push(format!(
                "{at} q_A={qa}: counted ({}, {}), formulas ({}, {}), A1 row {total}",
                s.flops_inv, s.flops_mat, eta.inv, eta.mat
            ));
        }
    }
}

fn collect_problem(case: &Case, options: &VerifyOptions) -> ProblemEvidence {
    let mn = case.problem.m() * case.problem.horizon;
    let states = sample_feasible_states(&case.problem, &case.qp, options.runs, options.seed)
        .expect("bundled problems have feasible states");
    let per_run = par_map_states(&states, |run, x0| {
        let mut config = SimConfig::new(x0.clone(), Variant::A1);
        config.precision = Precision::Full;
        config.keep_messages = true;
        let mut variants: [VariantEvidence; 4] = Default::default();
        let classical = match simulate_classical(&case.plant, &case.qp, &config) {
            Ok(t) => t,
            Err(f) => return (Some(format!("run {run}: {}", f.error)), variants),
        };
        for v in Variant::ALL {
            let ev = &mut variants[v.index()];
            ev.runs = 1;
            config.variant = v;
            let traj = match simulate_loopback(&case.plant, &case.qp, &config) {
                Ok(t) => t,
                Err(f) => {
                    ev.failures.push(format!("run {run}: {}", f.error));
                    continue;
                }
            };
            let (dx, du) = max_deviation(&traj, &classical);
            ev.max_state_deviation = dx;
            ev.max_input_deviation = du;
            ev.length_mismatches = usize::from(traj.steps.len() != classical.steps.len());
            for s in traj.steps.iter().filter(|s| s.event) {
                check_event(case, v, run, s, ev);
            }
        }
        (None, variants)
    });

    let mut evidence = ProblemEvidence {
        name: case.name,
        mn,
        classical_failures: Vec::new(),
        variants: Default::default(),
    };
    for (failure, variants) in per_run {
        evidence.classical_failures.extend(failure);
        for (total, part) in evidence.variants.iter_mut().zip(variants) {
            total.merge(part);
        }
    }
    evidence
}

impl ClosedLoopEvidence {
    pub fn collect(cases: &[Case], options: &VerifyOptions) -> Self {
        Self {
            problems: cases.iter().map(|c| collect_problem(c, options)).collect(),
        }
    }

    fn each(&self) -> impl Iterator<Item = (&ProblemEvidence, Variant, &VariantEvidence)> {
        self.problems
            .iter()
            .flat_map(|p| Variant::ALL.iter().map(move |&v| (p, v, &p.variants[v.index()])))
    }
}

/// Criterion 1: event-triggered runs reproduce the classical runs.
pub fn closed_loop_equivalence(evidence: &ClosedLoopEvidence) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in &evidence.problems {
        ok &= p.classical_failures.is_empty();
        if !p.classical_failures.is_empty() {
            parts.push(format!("{} classical: {} failed{}", p.name, p.classical_failures.len(), first(&p.classical_failures)));
        }
    }
    for (p, v, ev) in evidence.each() {
        let good = ev.failures.is_empty()
            && ev.length_mismatches == 0
            && ev.max_state_deviation <= EQUIVALENCE_TOLERANCE
            && ev.runs > 0;
        ok &= good;
        parts.push(format!(
            "{} {v}: {} runs, {} fallback steps, max |dx| {:.1e}, max |du| {:.1e}{}",
            p.name,
            ev.runs,
            ev.fallbacks,
            ev.max_state_deviation,
            ev.max_input_deviation,
            if good {
                String::new()
            } else {
                format!(
                    " [{} failed, {} length mismatches{}]",
                    ev.failures.len(),
                    ev.length_mismatches,
                    first(&ev.failures)
                )
            }
        ));
    }
    Outcome::judged("1", "closed-loop equivalence at full precision", ok, parts.join("; "))
}

/// Criterion 2: every message's length matches the bit formula, both as sent
/// at 64 bits per real and re-encoded at 16.
pub fn bit_exactness(evidence: &ClosedLoopEvidence) -> Outcome {
    let (mut messages, mut half, mut range) = (0, 0, 0);
    let mut mismatches: Vec<String> = Vec::new();
    for (_, _, ev) in evidence.each() {
        messages += ev.messages;
        half += ev.half_messages;
        range += ev.half_range_errors;
        mismatches.extend(ev.bit_mismatches.iter().cloned());
        mismatches.extend(ev.half_mismatches.iter().cloned());
    }
    let ok = mismatches.is_empty() && messages > 0;
    Outcome::judged(
        "2",
        "bit lengths equal the formulas",
        ok,
        format!(
            "{messages} messages at 64 bits per real, {half} re-encoded at 16 bits per real, {} mismatches{}; \
             {range} replies not representable in binary16",
            mismatches.len(),
            first(&mismatches)
        ),
    )
}

fn grid() -> impl Iterator<Item = (usize, usize, usize)> {
    GRID_NM.flat_map(|n| GRID_NM.flat_map(move |m| GRID_HORIZON.map(move |h| (n, m, h))))
}

/// Criterion 3: `η_inv/η_mat ≤ 18/79`, nondecreasing in `q_A`.
pub fn ratio_bound() -> Outcome {
    let mut lines = 0;
    let mut bound_fail = Vec::new();
    let mut monotone_fail = Vec::new();
    let mut worst = Ratio::new(0, 1);
    for (n, m, h) in grid() {
        let sweep = check_ratio_bound(n, m, h);
        lines += 1;
        worst = worst.max(sweep.max_ratio);
        if !sweep.bound_holds {
            bound_fail.push(format!("n={n} m={m} N={h}"));
        }
        if !sweep.monotone {
            monotone_fail.push(format!("n={n} m={m} N={h}"));
        }
    }
    Outcome::judged(
        "3",
        "inversion share bound",
        bound_fail.is_empty() && monotone_fail.is_empty(),
        format!(
            "{lines} grid lines, largest ratio {worst} ({:.6}) vs bound 18/79 ({:.6}); {} bound violations, {} non-monotone lines{}",
            ratio_f64(worst),
            18.0 / 79.0,
            bound_fail.len(),
            monotone_fail.len(),
            first(&[bound_fail, monotone_fail].concat())
        ),
    )
}

fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Criterion 4: the local flop counters equal the formulas exactly.
pub fn flop_reconciliation(evidence: &ClosedLoopEvidence) -> Outcome {
    let mut events = 0;
    let mut mismatches = Vec::new();
    for (_, v, ev) in evidence.each() {
        if v == Variant::A1 {
            events += ev.flop_events;
            mismatches.extend(ev.flop_mismatches.iter().cloned());
        }
    }
    Outcome::judged(
        "4",
        "instrumented flops equal the formulas",
        events >= 50 && mismatches.is_empty(),
        format!("{events} A1 events with the naive backend, {} mismatches{}", mismatches.len(), first(&mismatches)),
    )
}

/// Criterion 5, split: 5a `A1 ≤ A2`, 5b `A1, A3 ≤ A4`, 5c `A2 ≤ A4`,
/// 5d threshold predictions agree with direct counts.
pub fn encoding_order() -> Vec<Outcome> {
    let mut lines = 0;
    let mut a1_a2 = Vec::new();
    let mut a1_a3_a4 = Vec::new();
    let mut a2_a4 = Vec::new();
    let mut a2_a4_cases = 0;
    let mut contradicted = Vec::new();
    let mut strict_checked = 0;
    for (n, m, h) in grid() {
        lines += 1;
        let c = compare_encodings(n, m, h);
        if !c.a1_le_a2() {
            a1_a2.push(format!("n={n} m={m} N={h}"));
        }
        for v in [Variant::A1, Variant::A3] {
            if let Some(&qa) = c.a4_violations(v).first() {
                a1_a3_a4.push(format!("{v} n={n} m={m} N={h} q_A={qa}"));
            }
        }
        let bad = c.a4_violations(Variant::A2);
        a2_a4_cases += bad.len();
        if let Some(&qa) = bad.first() {
            let row = c.rows[qa];
            a2_a4.push(format!(
                "n={n} m={m} N={h} q_A={qa}: A2 {} > A4 {} bits",
                row.bits_of(Variant::A2),
                row.bits_of(Variant::A4)
            ));
        }
        if c.a1_prediction == Prediction::Contradicted {
            contradicted.push(format!("A3 > A1 at n={n} m={m} N={h}"));
        }
        strict_checked += usize::from(c.a1_prediction != Prediction::NoPrediction);
        for (qa, p) in c.a2_predictions.iter().enumerate() {
            strict_checked += usize::from(*p != Prediction::NoPrediction);
            if *p == Prediction::Contradicted {
                contradicted.push(format!("A3 > A2 at n={n} m={m} N={h} q_A={qa}"));
            }
        }
    }
    let fm = compare_encodings(8, 3, 10);
    let (a1, a3) = (fm.rows[0].bits_of(Variant::A1), fm.rows[0].bits_of(Variant::A3));
    let four_mass_ok = fm.a1_prediction == Prediction::Confirmed && a3 > a1;

    vec![
        Outcome::judged(
            "5a",
            "A1 never longer than A2",
            a1_a2.is_empty(),
            format!("{lines} grid lines, {} violations{}", a1_a2.len(), first(&a1_a2)),
        ),
        Outcome::judged(
            "5b",
            "A1 and A3 never longer than A4",
            a1_a3_a4.is_empty(),
            format!("{lines} grid lines, {} violations{}", a1_a3_a4.len(), first(&a1_a3_a4)),
        ),
        Outcome::judged(
            "5c",
            "A2 never longer than A4",
            a2_a4.is_empty(),
            format!(
                "{} grid lines with a violation, {a2_a4_cases} (shape, q_A) cases{}",
                a2_a4.len(),
                first(&a2_a4)
            ),
        ),
        Outcome::judged(
            "5d",
            "strict threshold predictions agree with bit counts",
            contradicted.is_empty() && four_mass_ok,
            format!(
                "{strict_checked} strict predictions checked, {} contradicted{}; four-mass oscillator: 14/3 > 8/3 predicts A3 {a3} > A1 {a1}",
                contradicted.len(),
                first(&contradicted)
            ),
        ),
    ]
}

/// Criterion 6: `flops(A2) ≤ flops(A1) ≤ flops(A3)` and the exact gap.
pub fn flop_order() -> Outcome {
    let mut checked = 0;
    let mut failures = Vec::new();
    for (n, m, h) in grid() {
        let base = Dims::for_box(n, m, h, 0);
        for qa in 0..=base.decision_len() {
            let d = base.with_active(qa);
            let [a1, a2, a3] = [Variant::A1, Variant::A2, Variant::A3].map(|v| predicted_flops(v, d));
            let qa = qa as i64;
            let mn = (m * h) as i64;
            let gap = Ratio::new(2, 3) * Ratio::from(qa.pow(3))
                + Ratio::from(qa * qa * (2 * mn + 5))
                + Ratio::new(10, 3) * Ratio::from(qa);
            checked += 1;
            if !(a2 <= a1 && a1 <= a3) || Ratio::from(a1 - a2) != gap {
                failures.push(format!("n={n} m={m} N={h} q_A={qa}: A1 {a1}, A2 {a2}, A3 {a3}, gap formula {gap}"));
            }
        }
    }
    Outcome::judged(
        "6",
        "flop order of the local computations",
        failures.is_empty(),
        format!("{checked} (shape, q_A) cases, {} violations{}", failures.len(), first(&failures)),
    )
}

/// Solution of a QP by trying every active subset of size at most `mN`.
/// Exponential; meant for `q ≤ 12`.
pub fn brute_force_qp(qp: &CondensedQp, x: &DVector<f64>) -> Option<DVector<f64>> {
    let nu = qp.dims.decision_len();
    let q = qp.q();
    let rhs = &qp.w + &qp.e * x;
    let grad = qp.f.transpose() * x;
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0u32..(1 << q) {
        let rows: Vec<usize> = (0..q).filter(|i| mask & (1 << i) != 0).collect();
        if rows.len() > nu {
            continue;
        }
        let k = rows.len();
        let mut kkt = DMatrix::<f64>::zeros(nu + k, nu + k);
        kkt.view_mut((0, 0), (nu, nu)).copy_from(&qp.h);
        let mut b = DVector::<f64>::zeros(nu + k);
        b.rows_mut(0, nu).copy_from(&(-&grad));
        for (j, &i) in rows.iter().enumerate() {
            for c in 0..nu {
                kkt[(nu + j, c)] = qp.g[(i, c)];
                kkt[(c, nu + j)] = qp.g[(i, c)];
            }
            b[nu + j] = rhs[i];
        }
        let Some(sol) = kkt.clone().lu().solve(&b) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let u = sol.rows(0, nu).into_owned();
        let feasible = (&qp.g * &u - &rhs).iter().all(|&r| r <= 1e-9);
        let dual_ok = sol.rows(nu, k).iter().all(|&l| l >= -1e-9);
        // the KKT residual guards against ill-conditioned solves
        let residual = (&kkt * &sol - &b).amax();
        if feasible && dual_ok && residual <= 1e-9 {
            let obj = 0.5 * u.dot(&(&qp.h * &u)) + grad.dot(&u);
            if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                best = Some((obj, u));
            }
        }
    }
    best.map(|(_, u)| u)
}

fn random_scalar_problem(rng: &mut ChaCha8Rng) -> MpcProblem {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x_hi = rng.random_range(0.5..5.0);
    let u_hi = rng.random_range(0.2..2.0);
    MpcProblem {
        a: one(rng.random_range(-1.5..1.5)),
        b: one(sign * rng.random_range(0.2..2.0)),
        q: one(rng.random_range(0.1..2.0)),
        r: one(rng.random_range(0.1..2.0)),
        p: None,
        horizon: 2,
        x_lo: DVector::from_element(1, -rng.random_range(0.5..5.0)),
        x_hi: DVector::from_element(1, x_hi),
        u_lo: DVector::from_element(1, -rng.random_range(0.2..2.0)),
        u_hi: DVector::from_element(1, u_hi),
        t_lo: None,
        t_hi: None,
    }
}

/// Criterion 7: regional laws agree with fresh solves inside their regions,
/// and the solver agrees with exhaustive enumeration on small instances.
pub fn regional_optimality(cases: &[Case], options: &VerifyOptions) -> Vec<Outcome> {
    let per_case = options.pairs.div_ceil(cases.len().max(1));
    let mut pairs = 0;
    let mut contained = 0;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        let seed = options.seed.wrapping_add(1000 + ci as u64);
        let pool = sample_feasible_states(&case.problem, &case.qp, per_case, seed).expect("feasible states");
        let results: Vec<_> = pool
            .par_iter()
            .enumerate()
            .map(|(i, x1)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let sol = qp::solve(&case.qp, x1).map_err(|e| format!("{} pair {i}: {e}", case.name))?;
                let region = match build_region(&case.qp, &sol.active, BackendKind::NaiveInverse) {
                    Ok(b) => b.region,
                    // not LICQ; no region to test
                    Err(_) => return Ok(None),
                };
                // step sizes spread over three decades of the box width
                let scale = [1e-1, 1e-2, 1e-3][i % 3] * rng.random::<f64>();
                let n = case.problem.n();
                let x2 = DVector::from_iterator(
                    n,
                    (0..n).map(|j| {
                        let width = case.problem.x_hi[j] - case.problem.x_lo[j];
                        x1[j] + scale * width * rng.random_range(-1.0..1.0)
                    }),
                );
                if !region.contains(&x2) {
                    return Ok(None);
                }
                let fresh = qp::solve(&case.qp, &x2).map_err(|e| format!("{} pair {i}: fresh solve {e}", case.name))?;
                let m = case.problem.m();
                let err = (region.law(&x2) - fresh.u_star.rows(0, m)).amax();
                Ok(Some(err))
            })
            .collect();
        for r in results {
            pairs += 1;
            match r {
                Ok(Some(err)) => {
                    contained += 1;
                    worst = worst.max(err);
                    if err > LAW_TOLERANCE {
                        failures.push(format!("{}: law error {err:e}", case.name));
                    }
                }
                Ok(None) => {}
                Err(e) => failures.push(e),
            }
        }
    }
    let law = Outcome::judged(
        "7a",
        "regional law equals a fresh solve inside the region",
        failures.is_empty() && contained > 0,
        format!(
            "{pairs} pairs, {contained} with the second state inside the region, max |u_law − u_qp| {worst:.1e}, {} failures{}",
            failures.len(),
            first(&failures)
        ),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(2000));
    let mut instances = 0;
    let mut feasible = 0;
    let mut infeasible = 0;
    let mut oracle_failures = Vec::new();
    let mut worst = 0.0f64;
    while instances < options.pairs {
        let problem = random_scalar_problem(&mut rng);
        let Ok(qp) = condense(&problem) else { continue };
        debug_assert!(qp.q() <= 12);
        for _ in 0..5 {
            // the margin beyond the box produces infeasible states too
            let x = DVector::from_element(1, rng.random_range(problem.x_lo[0] * 1.5..problem.x_hi[0] * 1.5));
            instances += 1;
            match (qp::solve(&qp, &x), brute_force_qp(&qp, &x)) {
                (Ok(sol), Some(u)) => {
                    feasible += 1;
                    let err = (&sol.u_star - &u).amax();
                    worst = worst.max(err);
                    if err > ENUMERATION_TOLERANCE {
                        oracle_failures.push(format!("x={}: solver and enumeration differ by {err:e}", x[0]));
                    }
                    // ties: a row at equality with a zero multiplier may be
                    // left out, so compare the rows at equality at each optimum
                    let tight = |u: &DVector<f64>| qp::identify_active_set(&qp, u, &x, 1e-8);
                    let (ours, theirs) = (tight(&sol.u_star), tight(&u));
                    let inside = sol.active.indices().iter().all(|&i| ours.contains(i));
                    if ours != theirs || !inside {
                        oracle_failures.push(format!(
                            "x={}: active set {:?}, rows at equality {:?} vs enumeration {:?}",
                            x[0],
                            sol.active.indices(),
                            ours.indices(),
                            theirs.indices()
                        ));
                    }
                }
                (Err(QpError::Infeasible), None) => infeasible += 1,
                (Ok(_), None) => oracle_failures.push(format!("x={}: solver found a solution, enumeration none", x[0])),
                (Err(e), Some(_)) => oracle_failures.push(format!("x={}: solver failed ({e}), enumeration solved", x[0])),
                (Err(e), None) => oracle_failures.push(format!("x={}: enumeration infeasible, solver said {e}", x[0])),
            }
        }
    }
    let oracle = Outcome::judged(
        "7b",
        "solver equals exhaustive enumeration for q ≤ 12 in U* and active set",
        oracle_failures.is_empty(),
        format!(
            "{instances} instances ({feasible} feasible, {infeasible} infeasible), max |U − U_enum| {worst:.1e}, {} disagreements{}",
            oracle_failures.len(),
            first(&oracle_failures)
        ),
    );
    vec![law, oracle]
}

/// Criterion 8: active-set sizes stay within `mN`.
pub fn active_set_bound(evidence: &ClosedLoopEvidence) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for p in &evidence.problems {
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for ev in &p.variants {
            for (&k, &c) in &ev.q_active_histogram {
                *hist.entry(k).or_default() += c;
            }
        }
        let max = hist.keys().next_back().copied().unwrap_or(0);
        ok &= max <= p.mn && !hist.is_empty();
        let shown: Vec<String> = hist.iter().map(|(k, c)| format!("{k}:{c}")).collect();
        parts.push(format!("{} max q_A {max} ≤ mN = {}, histogram {{{}}}", p.name, p.mn, shown.join(" ")));
    }
    Outcome::judged("8", "active-set size bound", ok, parts.join("; "))
}

/// Criterion 9: a run that never leaves its first region sends one request.
pub fn network_frugality() -> Outcome {
    let starts = [
        ("double_integrator", double_integrator(), vec![0.2, -0.1]),
        ("four_mass_oscillator", four_mass_oscillator(), vec![0.0; 8]),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, problem, x0) in starts {
        let case = Case::new(name, problem);
        let config = SimConfig::new(DVector::from_vec(x0), Variant::A1);
        match simulate_loopback(&case.plant, &case.qp, &config) {
            Ok(t) => {
                // one event means every predicted state stayed in the first region
                let good = t.events() == 1 && t.frames.requests == 1 && t.frames.replies == 1 && t.converged;
                ok &= good;
                parts.push(format!(
                    "{name}: {} steps, {} events, {} requests, {} replies",
                    t.steps.len(),
                    t.events(),
                    t.frames.requests,
                    t.frames.replies
                ));
            }
            Err(f) => {
                ok = false;
                parts.push(format!("{name}: {}", f.error));
            }
        }
    }
    Outcome::judged("9", "network used only on events", ok, parts.join("; "))
}

/// Reported only: how far binary16 replies move the loop.
pub fn half_precision_report(cases: &[Case], options: &VerifyOptions) -> Outcome {
    let mut parts = Vec::new();
    for case in cases {
        let runs = options.runs.min(20);
        let Ok(states) = sample_feasible_states(&case.problem, &case.qp, runs, options.seed) else {
            continue;
        };
        let template = SimConfig::new(states[0].clone(), Variant::A1);
        let out = run_batch_parallel(&case.plant, &case.qp, &states, &template, &Variant::ALL);
        for s in &out.report.summaries {
            parts.push(format!(
                "{} {}: {}/{runs} runs completed, max |dx| {:.1e}",
                case.name, s.variant, s.runs, s.max_state_deviation
            ));
        }
    }
    Outcome {
        id: "H",
        title: "binary16 downlink deviation",
        status: Status::Info,
        detail: parts.join("; "),
    }
}

/// Every check, in order.
pub fn run_all(options: &VerifyOptions) -> Vec<Outcome> {
    let cases = Case::bundled();
    let evidence = ClosedLoopEvidence::collect(&cases, options);
    let mut out = vec![
        closed_loop_equivalence(&evidence),
        bit_exactness(&evidence),
        ratio_bound(),
        flop_reconciliation(&evidence),
    ];
    out.extend(encoding_order());
    out.push(flop_order());
    out.extend(regional_optimality(&cases, options));
    out.push(active_set_bound(&evidence));
    out.push(network_frugality());
    out.push(half_precision_report(&cases, options));
    out
}
