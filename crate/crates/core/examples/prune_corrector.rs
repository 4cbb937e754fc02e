//! Train a corrector briefly, prune it at several variance thresholds and
//! show the size and output change of each result.
//!
//! ```text
//! cargo run --release --example prune_corrector -- [epochs]
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::cost::{count_macc, Topology};
use tinyfoc::ground_truth::{make_ground_truth, GtMethod, GtParams};
use tinyfoc::nn::{build_tinyfc, train, Samples, TinyFcWidths, TrainConfig};
use tinyfoc::opt::prune::{pca_prune, PruneConfig};
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
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (model, _) = train(build_tinyfc(TinyFcWidths::REFERENCE, 0)?, &data, &cfg)?;

    println!("threshold  params  MACC  max change  rms change  layers");
    for threshold in [1.0, 0.999, 0.99, 0.95, 0.9] {
        let pc = PruneConfig {
            energy_threshold: threshold,
            ..PruneConfig::default()
        };
        let (pruned, r) = pca_prune(&model, &data, &pc)?;
        let layers: Vec<String> = r
            .layers
            .iter()
            .map(|l| format!("b{}l{}:{}->{}", l.branch, l.layer, l.before, l.after))
            .collect();
        println!(
            "{threshold:>9}  {:>6}  {:>4}  {:>10.5}  {:>10.5}  {}",
            r.params_after,
            count_macc(&Topology::from(&pruned)).total,
            r.max_output_change,
            r.rms_output_change,
            layers.join(" ")
        );
    }
    Ok(())
}
