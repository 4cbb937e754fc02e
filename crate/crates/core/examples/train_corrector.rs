//! Simulate case 1 under PI control, derive the corrected current target,
//! train the reference network on it and compare closed-loop metrics.
//!
//! ```text
//! cargo run --release --example train_corrector -- [epochs [kp ki]]
//! ```

use std::sync::Arc;
use std::time::Instant;

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::ground_truth::{make_ground_truth, GtMethod, GtParams};
use tinyfoc::metrics::compute_metrics;
use tinyfoc::nn::{build_tinyfc, fine_tune, train_records, Samples, TinyFcWidths, TrainConfig};
use tinyfoc::plant::MotorParams;
use tinyfoc::profile::{case1_profile, case2_profile};

fn main() -> tinyfoc::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let epochs = args.first().map_or(50, |e| *e as usize);
    let plant = MotorParams::default();
    let mut ctl = ControllerConfig::for_plant(&plant);
    if let [_, kp, ki, ..] = args[..] {
        ctl.speed_gains.kp = kp;
        ctl.speed_gains.ki = ki;
    }
    let profile = case1_profile(0);
    let pi = run_closed_loop(&profile, &LoopConfig::pi_only(ctl), &plant, 10.0)?;
    let gt = make_ground_truth(&pi, GtMethod::Threshold { c: None }, GtParams::default())?;
    let nonzero = gt.records.iter().filter(|r| r.delta_iq_gt != 0.0).count();
    println!(
        "dataset: {} rows, {} with a correction, {} corrected runs",
        gt.records.len(),
        nonzero,
        gt.intervals.len()
    );

    let t0 = Instant::now();
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (model, report) =
        train_records(build_tinyfc(TinyFcWidths::REFERENCE, 0)?, &gt.records, &cfg)?;
    println!(
        "trained {} params in {:.1?}: best epoch {}, val mse {:.5}, test mse {:.5}",
        model.param_count(),
        t0.elapsed(),
        report.best_epoch,
        report.best_val_mse,
        report.test_mse
    );

    let scale = model.target_scale;
    let aug = run_closed_loop(
        &profile,
        &LoopConfig::augmented(ctl, Arc::new(model.clone()), scale),
        &plant,
        10.0,
    )?;
    println!("case 1 PI        : {:?}", compute_metrics(&pi)?);
    println!("case 1 augmented : {:?}", compute_metrics(&aug)?);

    let profile2 = case2_profile(0);
    let pi2 = run_closed_loop(&profile2, &LoopConfig::pi_only(ctl), &plant, 10.0)?;
    let gt2 = make_ground_truth(&pi2, GtMethod::Rectify { tau: 0.002 }, GtParams::default())?;
    println!("case 2 dataset: {} corrected runs", gt2.intervals.len());
    let (tuned, report) = fine_tune(model.clone(), &Samples::from(&gt2.records[..]), &cfg)?;
    println!("fine-tuned: val mse {:.5}", report.best_val_mse);
    for (name, m) in [("case-1 model", model), ("fine-tuned", tuned)] {
        let scale = m.target_scale;
        let aug2 = run_closed_loop(
            &profile2,
            &LoopConfig::augmented(ctl, Arc::new(m), scale),
            &plant,
            10.0,
        )?;
        println!("case 2 {name}: {:?}", compute_metrics(&aug2)?);
    }
    println!("case 2 PI          : {:?}", compute_metrics(&pi2)?);
    Ok(())
}
