//! Control-loop quality metrics: deviation statistics and maximum overshoot.

use serde::{Deserialize, Serialize};

use crate::control::SimTrace;
use crate::error::{Error, Result};
use crate::ground_truth::{constant_reference_runs, GtParams};

/// Window after each reference transition that is excluded from the
/// overshoot search (s).
pub const TRANSIENT_WINDOW: f64 = 0.010;

/// Tracking statistics in per-unit speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub max_deviation: f64,
    pub avg_deviation: f64,
    /// `None` when the trace contains no constant-reference run longer than
    /// the transient window, so overshoot is undefined.
    pub max_overshoot: Option<f64>,
}

/// Deviation and overshoot statistics for a closed-loop trace.
///
/// Overshoot is searched over every run of constant reference. Within a run
/// the search starts once the response has reached the reference (entered the
/// tracking band or crossed it) and the first [`TRANSIENT_WINDOW`] after the
/// transition has elapsed. The overshoot is the largest excursion of the
/// measured speed above the reference, clamped at zero. Runs that never reach
/// their reference do not contribute.
pub fn compute_metrics(trace: &SimTrace) -> Result<LoopMetrics> {
    compute_metrics_with(trace, TRANSIENT_WINDOW, GtParams::default().band)
}

pub fn compute_metrics_with(trace: &SimTrace, window: f64, band: f64) -> Result<LoopMetrics> {
    if trace.is_empty() {
        return Err(Error::Domain(
            "cannot compute metrics of an empty trace".into(),
        ));
    }
    let dev = trace
        .omega_ref
        .iter()
        .zip(&trace.omega_meas)
        .map(|(r, m)| (r - m).abs());
    let (max_deviation, sum) = dev.fold((0.0f64, 0.0f64), |(mx, s), d| (mx.max(d), s + d));
    let avg_deviation = sum / trace.len() as f64;

    let skip = if trace.sample_time > 0.0 {
        (window / trace.sample_time).round() as usize
    } else {
        0
    };
    let mut overshoot: Option<f64> = None;
    for (a, b) in constant_reference_runs(&trace.omega_ref) {
        let err = |k: usize| trace.omega_meas[k] - trace.omega_ref[k];
        let side = err(a).signum();
        let Some(reached) = (a..b).find(|&k| err(k).abs() <= band || err(k).signum() != side)
        else {
            continue;
        };
        let from = reached.max(a + skip);
        if from >= b {
            continue;
        }
        let peak = (from..b)
            .map(|k| trace.omega_meas[k] - trace.omega_ref[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let peak = peak.max(0.0);
        overshoot = Some(overshoot.map_or(peak, |o| o.max(peak)));
    }
    Ok(LoopMetrics {
        max_deviation,
        avg_deviation,
        max_overshoot: overshoot,
    })
}

/// Relative change `(new - old) / old` in percent; `None` when `old == 0`.
pub fn percent_change(old: f64, new: f64) -> Option<f64> {
    (old != 0.0).then(|| (new - old) / old * 100.0)
}
