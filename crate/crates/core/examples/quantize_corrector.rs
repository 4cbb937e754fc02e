//! Quantize a briefly trained corrector to int8 and compare integer and float
//! inference over the calibration rows.
//!
//! ```text
//! cargo run --release --example quantize_corrector -- [epochs]
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::cost::{estimate_memory, Topology};
use tinyfoc::ground_truth::{make_ground_truth, GtMethod, GtParams};
use tinyfoc::nn::{build_tinyfc, train, Samples, TinyFcWidths, TrainConfig};
use tinyfoc::opt::quant::{forward_int8, quantize_int8};
use tinyfoc::plant::MotorParams;
use tinyfoc::profile::case1_profile;

fn main() -> tinyfoc::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(5);
    let plant = MotorParams::default();
    let pi = run_closed_loop(
        &case1_profile(0),
        &LoopConfig::pi_only(ControllerConfig::for_plant(&plant)),
        &plant,
        10.0,
    )?;
    let data = Samples::from(
        &make_ground_truth(&pi, GtMethod::Threshold { c: None }, GtParams::default())?.records[..],
    );
    let (model, _) = train(
        build_tinyfc(TinyFcWidths::REFERENCE, 0)?,
        &data,
        &TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
    )?;

    let q = quantize_int8(&model, &data)?;
    let (mut worst, mut sum) = (0.0f64, 0.0);
    let step = (data.len() / 10_000).max(1);
    let rows: Vec<usize> = (0..data.len()).step_by(step).collect();
    for &i in &rows {
        let x = data.input(i);
        let d = (forward_int8(&q, x)? - model.forward(x)?).abs() / model.target_scale;
        worst = worst.max(d);
        sum += d;
    }
    println!(
        "{} rows: max |int8 - float| {worst:.4}, mean {:.5} (unit output)",
        rows.len(),
        sum / rows.len() as f64
    );
    println!("declared bound {:.4}", q.error_bound);
    let f = estimate_memory(&Topology::from(&model));
    let i = estimate_memory(&Topology::from(&q));
    println!(
        "weights: {} B float, {} B int8 (+{} B headers)",
        f.param_bytes, i.param_bytes, i.header_bytes
    );
    Ok(())
}
