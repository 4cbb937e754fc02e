//! Sweep speed-loop PI gains on the default plant and print the loop metrics
//! of both stress profiles, plus the settling error on a constant reference.
//!
//! ```text
//! cargo run --release --example tune_pi -- [kp ki]...
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::metrics::compute_metrics;
use tinyfoc::plant::MotorParams;
use tinyfoc::profile::{case1_profile, case2_profile, ReferenceProfile};

fn main() -> tinyfoc::Result<()> {
    let plant = MotorParams::default();
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let candidates: Vec<(f64, f64)> = if args.len() >= 2 {
        args.chunks_exact(2).map(|c| (c[0], c[1])).collect()
    } else {
        vec![(10.0, 200.0), (20.0, 500.0), (20.0, 1000.0), (40.0, 1500.0)]
    };
    println!(
        "{:>6} {:>7} | {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} | {:>9}",
        "kp", "ki", "c1 maxd", "c1 avgd", "c1 os", "c2 maxd", "c2 avgd", "c2 os", "|e| @10s"
    );
    for (kp, ki) in candidates {
        let mut ctl = ControllerConfig::for_plant(&plant);
        ctl.speed_gains.kp = kp;
        ctl.speed_gains.ki = ki;
        let cfg = LoopConfig::pi_only(ctl);
        let m1 = compute_metrics(&run_closed_loop(&case1_profile(0), &cfg, &plant, 10.0)?)?;
        let m2 = compute_metrics(&run_closed_loop(&case2_profile(0), &cfg, &plant, 10.0)?)?;
        let flat = run_closed_loop(&ReferenceProfile::constant(0.5, 10.0)?, &cfg, &plant, 10.0)?;
        let err = (flat.omega_ref.last().unwrap() - flat.omega_meas.last().unwrap()).abs();
        println!(
            "{kp:>6} {ki:>7} | {:>8.4} {:>8.4} {:>8.4} | {:>8.4} {:>8.4} {:>8.4} | {err:>9.2e}",
            m1.max_deviation,
            m1.avg_deviation,
            m1.max_overshoot.unwrap_or(f64::NAN),
            m2.max_deviation,
            m2.avg_deviation,
            m2.max_overshoot.unwrap_or(f64::NAN),
        );
    }
    Ok(())
}
