//! Operation counts, memory estimates and host latency for the reference
//! corrector, a smaller variant and their int8 versions.
//!
//! ```text
//! cargo run --release --example deployment_cost
//! ```

use tinyfoc::cost::{render_cost_table, CostReport};
use tinyfoc::experiment::AnyModel;
use tinyfoc::nn::{build_tinyfc, Normalization, Samples, TinyFcWidths};
use tinyfoc::opt::quant::quantize_int8;

fn main() -> tinyfoc::Result<()> {
    let mut calibration = Samples::new(3);
    for i in 0..2000 {
        let t = i as f64 / 2000.0;
        calibration.push(&[t, t * 0.95, 20.0 * (t * 13.0).sin()], 0.0);
    }
    let small = TinyFcWidths {
        outer: 6,
        inner: 6,
        head: 3,
    };
    let mut reports = Vec::new();
    for (name, widths) in [("reference", TinyFcWidths::REFERENCE), ("small", small)] {
        let mut m = build_tinyfc(widths, 0)?;
        m.input_norm = Some(Normalization::fit(calibration.rows(), 3));
        let q = quantize_int8(&m, &calibration)?;
        for (label, model) in [
            (name.to_string(), AnyModel::Float(m)),
            (format!("{name}-int8"), AnyModel::Int8(q)),
        ] {
            let mut r = CostReport::new(label, &model.topology());
            r.latency = Some(model.bench(2000, [0.5, 0.45, 3.0])?);
            reports.push(r);
        }
    }
    print!("{}", render_cost_table(&reports));
    let m = reports[0].macc;
    println!(
        "reference MACC items: weights {} bias {} residual {} relu {} tanh {} norm {} scale {}",
        m.weights, m.bias, m.residual, m.relu, m.tanh, m.normalization, m.output_scale
    );
    Ok(())
}
