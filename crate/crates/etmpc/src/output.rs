//! CSV writers. Comma separated, one header row, `.` as decimal mark.

use std::io::Write;

use etmpc_core::costmodel::{CostReport, EncodingComparison, Variant};
use etmpc_core::sim::{BatchReport, Trajectory};

use crate::batch::BatchOutcome;

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per step: `k, x1..xn, u1..um, e, q_A, bits, flops_inv, flops_mat`.
/// `q_A` is empty on steps without an event and for A4, whose reply carries
/// no active set.
pub fn write_trajectory<W: Write>(out: W, trajectory: &Trajectory) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = trajectory.final_state.len();
    let m = trajectory.steps.first().map_or(0, |s| s.u.len());
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u{i}")));
    header.extend(["e", "q_A", "bits", "flops_inv", "flops_mat"].map(String::from));
    w.write_record(&header)?;
    for s in &trajectory.steps {
        let mut row = vec![s.k.to_string()];
        row.extend(s.x.iter().map(f64::to_string));
        row.extend(s.u.iter().map(f64::to_string));
        row.push(u8::from(s.event).to_string());
        row.push(if s.event { opt(s.q_active) } else { String::new() });
        row.push(s.bits.to_string());
        row.push(s.flops_inv.to_string());
        row.push(s.flops_mat.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per variant with totals over all completed runs.
pub fn write_batch<W: Write>(out: W, outcome: &BatchOutcome) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "runs",
        "failed_runs",
        "steps",
        "events",
        "event_rate",
        "fallbacks",
        "max_q_A",
        "bits",
        "flops_inv",
        "flops_mat",
        "flops_online",
        "max_state_deviation",
        "max_input_deviation",
    ])?;
    for s in &outcome.report.summaries {
        let failed = outcome.failures.iter().filter(|f| f.variant == Some(s.variant)).count();
        w.write_record([
            s.variant.to_string(),
            s.runs.to_string(),
            failed.to_string(),
            s.steps.to_string(),
            s.events.to_string(),
            format!("{:.6}", s.event_rate()),
            s.fallbacks.to_string(),
            opt(s.max_q_active()),
            s.total_bits.to_string(),
            s.flops_inv.to_string(),
            s.flops_mat.to_string(),
            s.flops_online.to_string(),
            format!("{:e}", s.max_state_deviation),
            format!("{:e}", s.max_input_deviation),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `variant, q_A, events`: how often each active-set size was seen.
pub fn write_histogram<W: Write>(out: W, report: &BatchReport) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "q_A", "events"])?;
    for s in &report.summaries {
        for (qa, count) in &s.q_active_histogram {
            w.write_record([s.variant.to_string(), qa.to_string(), count.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Predicted cost rows. `ratio` is `flops_inv/flops_mat` as a decimal and
/// `ratio_exact` as a reduced fraction; both are empty when undefined.
pub fn write_analysis<W: Write>(out: W, rows: &[CostReport]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "n",
        "m",
        "N",
        "q",
        "q_A",
        "bits",
        "flops",
        "flops_inv",
        "flops_mat",
        "ratio",
        "ratio_exact",
    ])?;
    for r in rows {
        let d = r.dims;
        w.write_record([
            r.variant.to_string(),
            d.n.to_string(),
            d.m.to_string(),
            d.horizon.to_string(),
            d.q.to_string(),
            d.q_active.to_string(),
            r.bits.to_string(),
            r.flops.to_string(),
            r.flops_inv.to_string(),
            r.flops_mat.to_string(),
            opt(r.ratio.map(|x| *x.numer() as f64 / *x.denom() as f64)),
            opt(r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Bits of every encoding at every active-set size.
pub fn write_encodings<W: Write>(out: W, cmp: &EncodingComparison) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["q_A", "A1", "A2", "A3", "A4", "A2_threshold_strict"])?;
    for row in &cmp.rows {
        let mut rec = vec![row.q_active.to_string()];
        rec.extend(Variant::ALL.iter().map(|&v| row.bits_of(v).to_string()));
        rec.push(row.a2_threshold_strict.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
