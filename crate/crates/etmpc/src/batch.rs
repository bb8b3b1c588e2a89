//! Batches of closed-loop runs spread over threads.

use std::sync::Arc;

use etmpc_core::costmodel::Variant;
use etmpc_core::nalgebra::DVector;
use etmpc_core::problem::CondensedQp;
use etmpc_core::sim::{
    simulate_classical, simulate_loopback, BatchError, BatchReport, Plant, SimConfig, VariantSummary,
};
use rayon::prelude::*;

/// Aggregates of the runs that completed, and the ones that did not.
///
/// Failures are expected at half precision, where a quantized law can steer
/// the plant out of the feasible set or a reply can overflow binary16.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub report: BatchReport,
    /// Sorted by run index, classical run first.
    pub failures: Vec<BatchError>,
}

struct RunResult {
    summaries: Vec<VariantSummary>,
    failures: Vec<BatchError>,
}

/// Runs every state classically and under each of `variants`. Results do not
/// depend on the thread count.
pub fn run_batch_parallel(
    plant: &Plant,
    qp: &Arc<CondensedQp>,
    states: &[DVector<f64>],
    template: &SimConfig,
    variants: &[Variant],
) -> BatchOutcome {
    let runs: Vec<RunResult> = states
        .par_iter()
        .enumerate()
        .map(|(run, x0)| {
            let config = SimConfig {
                x0: x0.clone(),
                ..template.clone()
            };
            run_state(plant, qp, run, &config, variants)
        })
        .collect();

    let mut summaries: Vec<VariantSummary> = variants.iter().map(|&v| VariantSummary::new(v)).collect();
    let mut failures = Vec::new();
    for r in runs {
        for (total, part) in summaries.iter_mut().zip(&r.summaries) {
            total.merge(part);
        }
        failures.extend(r.failures);
    }
    BatchOutcome {
        report: BatchReport { summaries },
        failures,
    }
}

fn run_state(plant: &Plant, qp: &Arc<CondensedQp>, run: usize, config: &SimConfig, variants: &[Variant]) -> RunResult {
    let mut summaries: Vec<VariantSummary> = variants.iter().map(|&v| VariantSummary::new(v)).collect();
    let classical = match simulate_classical(plant, qp, config) {
        Ok(t) => t,
        Err(f) => {
            return RunResult {
                summaries,
                failures: vec![BatchError {
                    run,
                    variant: None,
                    error: f.error,
                }],
            }
        }
    };
    let mut failures = Vec::new();
    for (summary, &variant) in summaries.iter_mut().zip(variants) {
        let config = SimConfig {
            variant,
            ..config.clone()
        };
        match simulate_loopback(plant, qp, &config) {
            Ok(t) => summary.add(&t, &classical),
            Err(f) => failures.push(BatchError {
                run,
                variant: Some(variant),
                error: f.error,
            }),
        }
    }
    RunResult { summaries, failures }
}

/// Applies `f` to every state in parallel, keeping the input order.
pub fn par_map_states<R, F>(states: &[DVector<f64>], f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize, &DVector<f64>) -> R + Sync,
{
    states.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
