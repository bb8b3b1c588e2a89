//! Closed-loop simulation of the event-triggered scheme and of the classical
//! solve-every-step controller it must reproduce.
//!
//! At each step the local node applies `u = Kx + b` of its current region,
//! predicts `x(k+1) = Ax + Bu` and keeps the region while the prediction stays
//! inside it. Otherwise it sends the prediction to the central node and builds
//! the next region from the reply before step `k + 1`. The first region comes
//! from a forced request at `x0`.

// Failures hand back the partial trajectory, which makes the error type large.
#![allow(clippy::result_large_err)]

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::costmodel::{op_flops, MatrixOp, Variant};
use crate::linalg::vec_inf_norm;
use crate::netio::{
    CentralNode, ClientConfig, ClientError, FrameStats, LocalClient, Loopback, NodeRegistration, Transport,
};
use crate::problem::{CondensedQp, MpcProblem};
use crate::protocol::{Precision, WireMessage};
use crate::qp::{self, QpError};
use crate::region::{BackendKind, Region, RegionError};

pub const DEFAULT_MAX_STEPS: usize = 1000;
pub const DEFAULT_STOP_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STOP_STEPS: usize = 5;
/// Rejection sampling gives up after this many attempts for one sample.
pub const MAX_ATTEMPTS_PER_SAMPLE: u64 = 1_000_000;

/// Additive disturbance `w(k, x)` added to the plant update.
pub type Disturbance = fn(usize, &DVector<f64>) -> DVector<f64>;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub x0: DVector<f64>,
    pub variant: Variant,
    pub backend: BackendKind,
    pub precision: Precision,
    pub max_steps: usize,
    /// Stop once `‖x‖∞ ≤ stop_tolerance` for `stop_steps` consecutive steps.
    pub stop_tolerance: f64,
    pub stop_steps: usize,
    /// Off by default; the plant is the nominal model.
    pub disturbance: Option<Disturbance>,
    /// Keep every received message in the trajectory.
    pub keep_messages: bool,
    /// Check received Φ against the local Gram matrix (A2 only).
    pub verify_phi: Option<f64>,
}

impl SimConfig {
    pub fn new(x0: DVector<f64>, variant: Variant) -> Self {
        Self {
            x0,
            variant,
            backend: BackendKind::NaiveInverse,
            precision: Precision::Half,
            max_steps: DEFAULT_MAX_STEPS,
            stop_tolerance: DEFAULT_STOP_TOLERANCE,
            stop_steps: DEFAULT_STOP_STEPS,
            disturbance: None,
            keep_messages: false,
            verify_phi: None,
        }
    }

    pub fn client_config(&self, node_id: u16) -> ClientConfig {
        ClientConfig {
            node_id,
            variant: self.variant,
            precision: self.precision,
            backend: self.backend,
            verify_phi: self.verify_phi,
        }
    }
}

/// `x(k+1) = Ax(k) + Bu(k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl Plant {
    pub fn of(problem: &MpcProblem) -> Self {
        Self {
            a: problem.a.clone(),
            b: problem.b.clone(),
        }
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// A request was answered for this step's (predicted) state and its law
    /// is the one applied here.
    pub event: bool,
    pub q_active: Option<usize>,
    /// Downlink bits received for this step.
    pub bits: u64,
    /// Region construction on the local node.
    pub flops_inv: i64,
    pub flops_mat: i64,
    /// Evaluating the law and the membership test.
    pub flops_online: i64,
    /// The region could not be built; `u` came from a direct QP solve.
    pub fallback: bool,
    pub message: Option<WireMessage>,
}

impl StepRecord {
    fn new(k: usize, x: DVector<f64>, m: usize) -> Self {
        Self {
            k,
            x,
            u: DVector::zeros(m),
            event: false,
            q_active: None,
            bits: 0,
            flops_inv: 0,
            flops_mat: 0,
            flops_online: 0,
            fallback: false,
            message: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    /// State after the last recorded step.
    pub final_state: DVector<f64>,
    /// The stop rule fired before `max_steps`.
    pub converged: bool,
    /// Frames exchanged during the run.
    pub frames: FrameStats,
}

impl Trajectory {
    pub fn events(&self) -> usize {
        self.steps.iter().filter(|s| s.event).count()
    }

    pub fn total_bits(&self) -> u64 {
        self.steps.iter().map(|s| s.bits).sum()
    }

    /// `x(0), …, x(K)` including the final state.
    pub fn states(&self) -> Vec<&DVector<f64>> {
        self.steps.iter().map(|s| &s.x).chain(core::iter::once(&self.final_state)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("central node found the QP infeasible at step {step}")]
    CentralInfeasible { step: usize },
    #[error("QP failed at step {step}: {error}")]
    Qp { step: usize, error: QpError },
    #[error("client failed at step {step}: {error}")]
    Client { step: usize, error: ClientError },
    #[error("initial state has length {got}, expected {expected}")]
    Shape { expected: usize, got: usize },
}

/// A failed run with everything simulated up to the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct SimFailure {
    pub error: SimError,
    pub partial: Trajectory,
}

fn online_flops(region: &Region) -> i64 {
    let (m, n) = region.gain.shape();
    let q = region.t.nrows();
    op_flops(MatrixOp::Multiply { rows: m, inner: n, cols: 1 })
        + op_flops(MatrixOp::Add { rows: m, cols: 1 })
        + op_flops(MatrixOp::Multiply { rows: q, inner: n, cols: 1 })
        + op_flops(MatrixOp::Add { rows: q, cols: 1 })
}

struct StopRule {
    tolerance: f64,
    needed: usize,
    run: usize,
}

impl StopRule {
    fn observe(&mut self, x: &DVector<f64>) -> bool {
        if vec_inf_norm(x) <= self.tolerance {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.needed
    }
}

fn is_degenerate(e: &ClientError) -> bool {
    matches!(
        e,
        ClientError::CentralDegenerate(_) | ClientError::Region(RegionError::RankDeficient { .. })
    )
}

/// Runs the event-triggered loop against `client`'s central node.
pub fn simulate_event_triggered<T: Transport>(
    plant: &Plant,
    client: &mut LocalClient<T>,
    config: &SimConfig,
) -> Result<Trajectory, SimFailure> {
    let qp = client.qp().clone();
    let n = qp.n();
    let m = qp.m();
    let frames_before = client.transport().stats();
    let mut steps = Vec::new();
    let fail = |error: SimError, steps: Vec<StepRecord>, x: DVector<f64>, client: &LocalClient<T>| SimFailure {
        error,
        partial: Trajectory {
            steps,
            final_state: x,
            converged: false,
            frames: frames_delta(frames_before, client.transport().stats()),
        },
    };
    if config.x0.len() != n {
        return Err(fail(
            SimError::Shape { expected: n, got: config.x0.len() },
            steps,
            config.x0.clone(),
            client,
        ));
    }

    let mut stop = StopRule {
        tolerance: config.stop_tolerance,
        needed: config.stop_steps,
        run: 0,
    };
    let mut x = config.x0.clone();
    // state the next request is sent for: x0, then the one-step prediction
    let mut predicted = config.x0.clone();
    let mut region: Option<Region> = None;
    let mut request = true;
    let mut converged = false;

    for k in 0..config.max_steps {
        let mut rec = StepRecord::new(k, x.clone(), m);
        if request {
            rec.event = true;
            match client.request_law(&predicted) {
                Ok(update) => {
                    rec.q_active = update.q_active();
                    rec.bits = update.message.bit_length;
                    rec.flops_inv = update.build.flops.inversion;
                    rec.flops_mat = update.build.flops.matrix;
                    if config.keep_messages {
                        rec.message = Some(update.message);
                    }
                    region = Some(update.build.region);
                }
                Err(ClientError::CentralInfeasible(_)) => {
                    return Err(fail(SimError::CentralInfeasible { step: k }, steps, x, client));
                }
                Err(e) if is_degenerate(&e) => {
                    log::info!("step {k}: {e}; falling back to a direct QP solve");
                    region = None;
                }
                Err(error) => return Err(fail(SimError::Client { step: k, error }, steps, x, client)),
            }
        }

        let u = match &region {
            Some(r) => {
                rec.flops_online = online_flops(r);
                r.law(&x)
            }
            None => {
                rec.fallback = true;
                match qp::solve(&qp, &x) {
                    Ok(sol) => sol.u_star.rows(0, m).into_owned(),
                    Err(error) => return Err(fail(SimError::Qp { step: k, error }, steps, x, client)),
                }
            }
        };
        rec.u = u.clone();
        predicted = plant.step(&x, &u);
        request = match &region {
            Some(r) => !r.contains(&predicted),
            None => true,
        };
        x = match config.disturbance {
            Some(w) => &predicted + w(k, &x),
            None => predicted.clone(),
        };
        steps.push(rec);
        if stop.observe(&x) {
            converged = true;
            break;
        }
    }

    Ok(Trajectory {
        steps,
        final_state: x,
        converged,
        frames: frames_delta(frames_before, client.transport().stats()),
    })
}

fn frames_delta(before: FrameStats, after: FrameStats) -> FrameStats {
    FrameStats {
        requests: after.requests - before.requests,
        replies: after.replies - before.replies,
        request_bytes: after.request_bytes - before.request_bytes,
        reply_bytes: after.reply_bytes - before.reply_bytes,
    }
}

/// Node id used by the loopback convenience runner.
pub const LOOPBACK_NODE_ID: u16 = 1;

/// Sets up a private central node and loopback transport for one run.
pub fn simulate_loopback(plant: &Plant, qp: &Arc<CondensedQp>, config: &SimConfig) -> Result<Trajectory, SimFailure> {
    let mut central = CentralNode::new();
    central.register(
        LOOPBACK_NODE_ID,
        NodeRegistration {
            qp: qp.clone(),
            variant: config.variant,
            precision: config.precision,
        },
    );
    let mut client = LocalClient::new(
        Loopback::new(Arc::new(central)),
        qp.clone(),
        config.client_config(LOOPBACK_NODE_ID),
    );
    simulate_event_triggered(plant, &mut client, config)
}

/// Solves the QP at every step and applies its first input block.
pub fn simulate_classical(plant: &Plant, qp: &CondensedQp, config: &SimConfig) -> Result<Trajectory, SimFailure> {
    let m = qp.m();
    let mut steps = Vec::new();
    let mut x = config.x0.clone();
    let mut stop = StopRule {
        tolerance: config.stop_tolerance,
        needed: config.stop_steps,
        run: 0,
    };
    let mut converged = false;
    for k in 0..config.max_steps {
        let mut rec = StepRecord::new(k, x.clone(), m);
        let sol = match qp::solve(qp, &x) {
            Ok(s) => s,
            Err(error) => {
                let error = match error {
                    QpError::Infeasible => SimError::CentralInfeasible { step: k },
                    error => SimError::Qp { step: k, error },
                };
                return Err(SimFailure {
                    error,
                    partial: Trajectory {
                        steps,
                        final_state: x,
                        converged: false,
                        frames: FrameStats::default(),
                    },
                });
            }
        };
        rec.q_active = Some(sol.active.len());
        rec.u = sol.u_star.rows(0, m).into_owned();
        let next = plant.step(&x, &rec.u);
        x = match config.disturbance {
            Some(w) => &next + w(k, &x),
            None => next,
        };
        steps.push(rec);
        if stop.observe(&x) {
            converged = true;
            break;
        }
    }
    Ok(Trajectory {
        steps,
        final_state: x,
        converged,
        frames: FrameStats::default(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("count must be at least 1")]
    ZeroCount,
    #[error("no feasible state after {attempts} attempts; try a smaller state box")]
    TooManyRejections { attempts: u64 },
}

/// Uniform rejection sampling over the state box, keeping states at which
/// the QP is feasible. Deterministic for a given seed.
pub fn sample_feasible_states(
    problem: &MpcProblem,
    qp: &CondensedQp,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, SampleError> {
    if count == 0 {
        return Err(SampleError::ZeroCount);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = problem.n();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut attempts = 0u64;
        loop {
            if attempts == MAX_ATTEMPTS_PER_SAMPLE {
                return Err(SampleError::TooManyRejections { attempts });
            }
            attempts += 1;
            let x = DVector::from_iterator(
                n,
                (0..n).map(|i| rng.random_range(problem.x_lo[i]..=problem.x_hi[i])),
            );
            if qp::solve(qp, &x).is_ok() {
                out.push(x);
                break;
            }
        }
    }
    Ok(out)
}

/// Largest state and input deviation over the steps both runs share.
pub fn max_deviation(a: &Trajectory, b: &Trajectory) -> (f64, f64) {
    let states = a
        .states()
        .into_iter()
        .zip(b.states())
        .map(|(x, y)| vec_inf_norm(&(x - y)))
        .fold(0.0, f64::max);
    let inputs = a
        .steps
        .iter()
        .zip(&b.steps)
        .map(|(s, t)| vec_inf_norm(&(&s.u - &t.u)))
        .fold(0.0, f64::max);
    (states, inputs)
}

/// Aggregates of many event-triggered runs of one encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub steps: usize,
    pub events: usize,
    pub fallbacks: usize,
    pub q_active_histogram: BTreeMap<usize, usize>,
    pub total_bits: u64,
    pub flops_inv: i64,
    pub flops_mat: i64,
    pub flops_online: i64,
    pub max_state_deviation: f64,
    pub max_input_deviation: f64,
    /// Runs whose step count differs from the classical run.
    pub length_mismatches: usize,
}

impl VariantSummary {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            runs: 0,
            steps: 0,
            events: 0,
            fallbacks: 0,
            q_active_histogram: BTreeMap::new(),
            total_bits: 0,
            flops_inv: 0,
            flops_mat: 0,
            flops_online: 0,
            max_state_deviation: 0.0,
            max_input_deviation: 0.0,
            length_mismatches: 0,
        }
    }

    pub fn event_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.events as f64 / self.steps as f64
        }
    }

    pub fn max_q_active(&self) -> Option<usize> {
        self.q_active_histogram.keys().next_back().copied()
    }

    pub fn add(&mut self, event: &Trajectory, classical: &Trajectory) {
        self.runs += 1;
        self.steps += event.steps.len();
        for s in &event.steps {
            if s.event {
                self.events += 1;
                if let Some(qa) = s.q_active {
                    *self.q_active_histogram.entry(qa).or_default() += 1;
                }
            }
            self.fallbacks += usize::from(s.fallback);
            self.total_bits += s.bits;
            self.flops_inv += s.flops_inv;
            self.flops_mat += s.flops_mat;
            self.flops_online += s.flops_online;
        }
        let (dx, du) = max_deviation(event, classical);
        self.max_state_deviation = self.max_state_deviation.max(dx);
        self.max_input_deviation = self.max_input_deviation.max(du);
        self.length_mismatches += usize::from(event.steps.len() != classical.steps.len());
    }

    pub fn merge(&mut self, other: &VariantSummary) {
        self.runs += other.runs;
        self.steps += other.steps;
        self.events += other.events;
        self.fallbacks += other.fallbacks;
        for (&qa, &c) in &other.q_active_histogram {
            *self.q_active_histogram.entry(qa).or_default() += c;
        }
        self.total_bits += other.total_bits;
        self.flops_inv += other.flops_inv;
        self.flops_mat += other.flops_mat;
        self.flops_online += other.flops_online;
        self.max_state_deviation = self.max_state_deviation.max(other.max_state_deviation);
        self.max_input_deviation = self.max_input_deviation.max(other.max_input_deviation);
        self.length_mismatches += other.length_mismatches;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub summaries: Vec<VariantSummary>,
}

impl BatchReport {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("run {run} ({}): {error}", run_label(.variant))]
pub struct BatchError {
    pub run: usize,
    /// `None` for the classical reference run.
    pub variant: Option<Variant>,
    pub error: SimError,
}

fn run_label(variant: &Option<Variant>) -> &'static str {
    match variant {
        Some(Variant::A1) => "A1",
        Some(Variant::A2) => "A2",
        Some(Variant::A3) => "A3",
        Some(Variant::A4) => "A4",
        None => "classical",
    }
}

/// One initial state run classically and under every variant of `variants`.
pub fn run_one(
    plant: &Plant,
    qp: &Arc<CondensedQp>,
    run: usize,
    template: &SimConfig,
    variants: &[Variant],
) -> Result<(Trajectory, Vec<Trajectory>), BatchError> {
    let classical = simulate_classical(plant, qp, template).map_err(|f| BatchError {
        run,
        variant: None,
        error: f.error,
    })?;
    let mut event_runs = Vec::with_capacity(variants.len());
    for &variant in variants {
        let config = SimConfig {
            variant,
            ..template.clone()
        };
        let traj = simulate_loopback(plant, qp, &config).map_err(|f| BatchError {
            run,
            variant: Some(variant),
            error: f.error,
        })?;
        event_runs.push(traj);
    }
    Ok((classical, event_runs))
}

/// Runs every state in `states` classically and under each variant,
/// sequentially.
pub fn run_batch(
    plant: &Plant,
    qp: &Arc<CondensedQp>,
    states: &[DVector<f64>],
    template: &SimConfig,
    variants: &[Variant],
) -> Result<BatchReport, BatchError> {
    let mut summaries: Vec<VariantSummary> = variants.iter().map(|&v| VariantSummary::new(v)).collect();
    for (run, x0) in states.iter().enumerate() {
        let config = SimConfig {
            x0: x0.clone(),
            ..template.clone()
        };
        let (classical, runs) = run_one(plant, qp, run, &config, variants)?;
        for (summary, traj) in summaries.iter_mut().zip(&runs) {
            summary.add(traj, &classical);
        }
    }
    Ok(BatchReport { summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::library::double_integrator;
    use crate::problem::condense;
    use alloc::vec;
    use nalgebra::dvector;

    fn setup() -> (Plant, Arc<CondensedQp>, MpcProblem) {
        let p = double_integrator();
        (Plant::of(&p), Arc::new(condense(&p).unwrap()), p)
    }

    #[test]
    fn origin_start_needs_one_event() {
        let (plant, qp, _) = setup();
        let config = SimConfig::new(dvector![0.0, 0.0], Variant::A1);
        let t = simulate_loopback(&plant, &qp, &config).unwrap();
        assert_eq!(t.events(), 1);
        assert!(t.converged);
        assert_eq!(t.steps.len(), DEFAULT_STOP_STEPS);
        assert_eq!(t.frames.requests, 1);
        assert!(t.states().iter().all(|x| x.amax() == 0.0));
        let c = simulate_classical(&plant, &qp, &config).unwrap();
        assert!(c.states().iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn event_triggered_matches_classical() {
        let (plant, qp, _) = setup();
        for v in Variant::ALL {
            let mut config = SimConfig::new(dvector![8.0, -2.0], v);
            config.precision = Precision::Full;
            let e = simulate_loopback(&plant, &qp, &config).unwrap();
            let c = simulate_classical(&plant, &qp, &config).unwrap();
            let (dx, du) = max_deviation(&e, &c);
            assert!(dx <= 1e-6 && du <= 1e-6, "{v}: {dx} {du}");
            assert!(e.converged);
            assert!(e.events() >= 1 && e.events() < e.steps.len());
        }
    }

    #[test]
    fn infeasible_start_aborts() {
        let (plant, qp, _) = setup();
        let config = SimConfig::new(dvector![10.0, 5.0], Variant::A1);
        let err = simulate_loopback(&plant, &qp, &config).unwrap_err();
        assert_eq!(err.error, SimError::CentralInfeasible { step: 0 });
        assert!(err.partial.steps.is_empty());
    }

    #[test]
    fn sampling_is_deterministic_and_feasible() {
        let (_, qp, problem) = setup();
        let a = sample_feasible_states(&problem, &qp, 5, 42).unwrap();
        let b = sample_feasible_states(&problem, &qp, 5, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| qp::solve(&qp, x).is_ok()));
        assert_eq!(sample_feasible_states(&problem, &qp, 0, 1), Err(SampleError::ZeroCount));
    }

    #[test]
    fn batch_summaries() {
        let (plant, qp, problem) = setup();
        let states = sample_feasible_states(&problem, &qp, 4, 7).unwrap();
        let mut template = SimConfig::new(states[0].clone(), Variant::A1);
        template.precision = Precision::Full;
        let report = run_batch(&plant, &qp, &states, &template, &Variant::ALL).unwrap();
        let a1 = report.summary(Variant::A1).unwrap();
        let a4 = report.summary(Variant::A4).unwrap();
        assert_eq!(a1.runs, 4);
        assert_eq!(a4.flops_inv + a4.flops_mat, 0);
        assert!(a1.total_bits < a4.total_bits);
        assert!(a1.max_q_active().unwrap() <= 5);
        assert!(a1.max_state_deviation <= 1e-6);
    }
}
