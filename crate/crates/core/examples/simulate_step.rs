//! Step the closed loop to half speed under PI control, print tracking
//! figures and write a plot of the run.
//!
//! ```text
//! cargo run --release --example simulate_step -- [target] [out.svg]
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::metrics::compute_metrics;
use tinyfoc::plant::{inverse_park, park_transform, MotorParams};
use tinyfoc::plot::plot_trace;
use tinyfoc::profile::ReferenceProfile;

fn main() -> tinyfoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let target: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.5);
    let out = args.next().unwrap_or_else(|| "step.svg".into());

    // the transforms the controller works in
    let (alpha, beta) = inverse_park(1.0, 2.0, 0.7)?;
    let (d, q) = park_transform(alpha, beta, 0.7)?;
    println!("park round trip: (1, 2) -> ({alpha:.4}, {beta:.4}) -> ({d:.12}, {q:.12})");

    let plant = MotorParams::default();
    let ctl = ControllerConfig::for_plant(&plant);
    let profile = ReferenceProfile::constant(target, 2.0)?;
    let trace = run_closed_loop(&profile, &LoopConfig::pi_only(ctl), &plant, 2.0)?;

    let err = |k: usize| (trace.omega_meas[k] - trace.omega_ref[k]).abs();
    let settled = (0..trace.len()).rev().take_while(|&k| err(k) < 1e-3).last();
    let m = compute_metrics(&trace)?;
    println!(
        "{} samples at {:.2} us",
        trace.len(),
        trace.sample_time * 1e6
    );
    match settled {
        Some(k) => println!("within 1e-3 of {target} from t = {:.4} s", trace.time(k)),
        None => println!("did not settle within 1e-3"),
    }
    println!(
        "peak overshoot {:.4} p.u., final iq {:.3} A",
        m.max_overshoot.unwrap_or(0.0),
        trace.iq_adj[trace.len() - 1]
    );
    plot_trace(&trace, "constant reference", out.as_ref())?;
    println!("wrote {out}");
    Ok(())
}
