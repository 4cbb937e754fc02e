//! Compare the Gaussian-process search against random search on the width,
//! learning-rate and batch-size space, using a subset of the case-1 data.
//!
//! ```text
//! cargo run --release --example hyperparameter_search -- [budget]
//! ```

use tinyfoc::control::{run_closed_loop, ControllerConfig, LoopConfig};
use tinyfoc::experiment::strided_subset;
use tinyfoc::ground_truth::{make_ground_truth, GtMethod, GtParams};
use tinyfoc::nn::TrainConfig;
use tinyfoc::opt::hpo::{hpo_search, HpoSpace, Strategy};
use tinyfoc::plant::MotorParams;
use tinyfoc::profile::case1_profile;

fn main() -> tinyfoc::Result<()> {
    let budget = std::env::args()
        .nth(1)
        .and_then(|a| a.parse().ok())
        .unwrap_or(12);
    let plant = MotorParams::default();
    let pi = run_closed_loop(
        &case1_profile(0),
        &LoopConfig::pi_only(ControllerConfig::for_plant(&plant)),
        &plant,
        10.0,
    )?;
    let gt = make_ground_truth(&pi, GtMethod::Threshold { c: None }, GtParams::default())?;
    let data = strided_subset(&gt.records, 10_000);
    let base = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };

    for strategy in [Strategy::Random, Strategy::Bayes] {
        let space = HpoSpace {
            budget,
            strategy,
            ..HpoSpace::default()
        };
        let r = hpo_search(&space, &data, &base)?;
        let mut scores: Vec<f64> = r.trials.iter().filter_map(|t| t.objective).collect();
        scores.sort_by(f64::total_cmp);
        println!(
            "{strategy:?}: best val mse {:.5} (median {:.5}) with {:?}, lr {:.2e}, batch {}",
            r.val_mse,
            scores[scores.len() / 2],
            r.best.widths,
            r.best.learning_rate,
            r.best.batch_size
        );
    }
    Ok(())
}
