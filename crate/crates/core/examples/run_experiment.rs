//! Run a configured experiment and print its summary tables. Without an
//! argument a shortened version of the standard study is used.
//!
//! ```text
//! cargo run --release --example run_experiment -- [config.toml] [out-dir]
//! ```

use std::path::PathBuf;

use tinyfoc::experiment::{run_experiment, ExperimentConfig};

fn main() -> tinyfoc::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) if p != "-" => ExperimentConfig::load(p.as_ref())?,
        _ => {
            let mut c = ExperimentConfig::standard(0);
            c.name = "short".into();
            c.train.epochs = 5;
            c.write_traces = false;
            c
        }
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "experiment-out".into()));
    run_experiment(&cfg, &out)?;
    print!(
        "{}",
        std::fs::read_to_string(out.join("summary.txt"))
            .map_err(|e| tinyfoc::Error::io(&out, e))?
    );
    Ok(())
}
