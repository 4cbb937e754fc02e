//! Derive corrected current targets from a PI-only run with both methods and
//! summarize what each one changes.
//!
//! ```text
//! cargo run --release --example ground_truth_targets -- [case] [tau]
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::ground_truth::{make_ground_truth, GtMethod, GtParams};
use tinyfoc::plant::MotorParams;
use tinyfoc::profile::{case1_profile, case2_profile};

fn main() -> tinyfoc::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let case: u32 = args.first().and_then(|a| a.parse().ok()).unwrap_or(1);
    let tau: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0.002);
    let profile = if case == 2 {
        case2_profile(0)
    } else {
        case1_profile(0)
    };

    let plant = MotorParams::default();
    let trace = run_closed_loop(
        &profile,
        &LoopConfig::pi_only(ControllerConfig::for_plant(&plant)),
        &plant,
        10.0,
    )?;
    for method in [GtMethod::Threshold { c: None }, GtMethod::Rectify { tau }] {
        let gt = make_ground_truth(&trace, method, GtParams::default())?;
        let changed = gt.records.iter().filter(|r| r.delta_iq_gt != 0.0).count();
        let largest = gt
            .records
            .iter()
            .map(|r| r.delta_iq_gt.abs())
            .fold(0.0, f64::max);
        // every row reconstructs the adjusted signal exactly
        let exact = gt
            .records
            .iter()
            .zip(&gt.adjusted)
            .all(|(r, a)| r.iq_pi + r.delta_iq_gt == *a);
        println!(
            "{method:?}: {} rows, {} corrected intervals, {changed} rows changed, largest |delta| {largest:.3} A, exact {exact}",
            gt.records.len(),
            gt.intervals.len()
        );
    }
    Ok(())
}
