//! Deployment cost estimates: operation counts, memory footprint and host
//! latency.
//!
//! Counting convention. One multiply-accumulate of a weight counts as one
//! MACC. The other operations are counted separately and itemized: one per
//! bias add, one per residual add, one per ReLU, one per `tanh`, two per
//! input feature for the normalization (subtract, multiply) and one for the
//! final output scaling. `total` is the sum of all items.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::nn::model::{Activation, LayerSpec, TinyFCModel};
use crate::opt::quant::QuantizedModel;

/// Flash taken by the vendor inference runtime (KiB). Reported for parity
/// with MCU toolchain figures; vendor-reported, not modeled.
pub const VENDOR_LIB_FLASH_KIB: (f64, f64) = (15.0, 32.0);
/// RAM taken by the vendor inference runtime (KiB). Vendor-reported, not
/// modeled.
pub const VENDOR_LIB_RAM_KIB: (f64, f64) = (6.0, 13.0);

/// Per-layer header: widths, activation tag and residual wiring (4 x u32).
pub const LAYER_HEADER_BYTES: usize = 16;
/// Extra per-layer quantization parameters for int8 models: weight and bias
/// scales, output activation scale and zero point, two fixed-point
/// multipliers (8 x 4 bytes).
pub const INT8_LAYER_EXTRA_BYTES: usize = 32;
/// Model header: version, input width, normalization and output scale.
pub const MODEL_HEADER_BYTES: usize = 32;

/// Numeric format of a deployed model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    Int8,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::Int8 => 1,
        }
    }
}

/// Architecture view shared by float and quantized models.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input_width: usize,
    pub branches: Vec<Vec<LayerSpec>>,
    pub merge: LayerSpec,
    pub normalized: bool,
    pub precision: Precision,
}

impl Topology {
    pub fn param_count(&self) -> usize {
        self.layers().map(|l| l.out_width * (l.in_width + 1)).sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.branches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.merge))
    }
}

impl From<&TinyFCModel> for Topology {
    fn from(m: &TinyFCModel) -> Self {
        Self {
            input_width: m.input_width,
            branches: m
                .branches
                .iter()
                .map(|b| b.iter().map(|l| l.spec.clone()).collect())
                .collect(),
            merge: m.merge.spec.clone(),
            normalized: m.input_norm.is_some(),
            precision: Precision::F32,
        }
    }
}

impl From<&QuantizedModel> for Topology {
    fn from(q: &QuantizedModel) -> Self {
        Self {
            input_width: q.input_width,
            branches: q
                .branches
                .iter()
                .map(|b| b.iter().map(|l| l.spec.clone()).collect())
                .collect(),
            merge: q.merge.spec.clone(),
            normalized: true,
            precision: Precision::Int8,
        }
    }
}

/// Itemized operation count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaccCount {
    pub weights: usize,
    pub bias: usize,
    pub residual: usize,
    pub relu: usize,
    pub tanh: usize,
    pub normalization: usize,
    pub output_scale: usize,
    pub total: usize,
}

pub fn count_macc(t: &Topology) -> MaccCount {
    let mut c = MaccCount::default();
    for l in t.layers() {
        c.weights += l.in_width * l.out_width;
        c.bias += l.out_width;
        if l.residual_from.is_some() {
            c.residual += l.out_width;
        }
        match l.activation {
            Activation::Relu => c.relu += l.out_width,
            Activation::Tanh => c.tanh += l.out_width,
            Activation::Identity => {}
        }
    }
    if t.normalized {
        c.normalization = 2 * t.input_width;
    }
    c.output_scale = t.merge.out_width;
    c.total = c.weights + c.bias + c.residual + c.relu + c.tanh + c.normalization + c.output_scale;
    c
}

/// Static memory estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub precision: Precision,
    /// Weight and bias payload.
    pub param_bytes: usize,
    pub header_bytes: usize,
    /// Flash for the model: payload plus headers.
    pub weight_bytes: usize,
    /// Peak bytes of simultaneously live activation buffers.
    pub activation_bytes: usize,
}

pub fn estimate_memory(t: &Topology) -> MemoryEstimate {
    let per_layer = LAYER_HEADER_BYTES
        + match t.precision {
            Precision::F32 => 0,
            Precision::Int8 => INT8_LAYER_EXTRA_BYTES,
        };
    let param_bytes = t.param_count() * t.precision.bytes();
    let header_bytes = MODEL_HEADER_BYTES + per_layer * t.layers().count();
    MemoryEstimate {
        precision: t.precision,
        param_bytes,
        header_bytes,
        weight_bytes: param_bytes + header_bytes,
        activation_bytes: peak_live_elements(t) * t.precision.bytes(),
    }
}

/// Peak number of activation elements alive at once when the branches are
/// evaluated one after another and every buffer is freed after its last use.
/// The input buffer lives until the last branch has read it, each layer needs
/// its input, its output and any residual source still to be read, and each
/// branch head stays alive until the merge.
pub fn peak_live_elements(t: &Topology) -> usize {
    let mut heads = 0;
    let mut peak = 0;
    let nb = t.branches.len();
    for (bi, branch) in t.branches.iter().enumerate() {
        for (li, l) in branch.iter().enumerate() {
            let input_alive = li == 0 || bi + 1 < nb;
            let mut live = heads + l.out_width;
            if input_alive {
                live += t.input_width;
            }
            // earlier outputs of this branch read at layer li or later
            for (j, prev) in branch[..li].iter().enumerate() {
                let read_later =
                    j + 1 == li || branch[li..].iter().any(|r| r.residual_from == Some(j));
                if read_later {
                    live += prev.out_width;
                }
            }
            peak = peak.max(live);
        }
        heads += branch.last().map_or(t.input_width, |l| l.out_width);
    }
    peak.max(heads + t.merge.out_width)
}

/// Host latency statistics in nanoseconds per inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n_runs: usize,
    /// Inferences timed together per sample to stay clear of timer
    /// resolution.
    pub batch: usize,
    pub min_ns: f64,
    pub median_ns: f64,
    pub p99_ns: f64,
    pub mean_ns: f64,
}

/// Shortest span a single timed sample should cover.
const MIN_SAMPLE_NS: f64 = 20_000.0;

/// Time `n_runs` samples of `f` after a warmup. Calls that finish faster than
/// the timer can resolve comfortably are grouped into batches; the batch size
/// is reported and the statistics are per call.
pub fn bench_latency<F: FnMut() -> f64>(n_runs: usize, mut f: F) -> crate::Result<LatencyStats> {
    if n_runs < 100 {
        return Err(crate::Error::Config(format!(
            "n_runs {n_runs} must be at least 100"
        )));
    }
    let t0 = Instant::now();
    let mut warm = 0usize;
    while warm < 100 || t0.elapsed().as_secs_f64() < 0.01 {
        black_box(f());
        warm += 1;
    }
    let per_call = t0.elapsed().as_nanos() as f64 / warm as f64;
    let batch = ((MIN_SAMPLE_NS / per_call.max(1.0)).ceil() as usize).max(1);
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        for _ in 0..batch {
            black_box(f());
        }
        samples.push(t.elapsed().as_nanos() as f64 / batch as f64);
    }
    samples.sort_by(f64::total_cmp);
    let pick = |q: f64| samples[((q * (n_runs - 1) as f64).round() as usize).min(n_runs - 1)];
    Ok(LatencyStats {
        n_runs,
        batch,
        min_ns: samples[0],
        median_ns: pick(0.5),
        p99_ns: pick(0.99),
        mean_ns: samples.iter().sum::<f64>() / n_runs as f64,
    })
}

/// Cost summary of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub name: String,
    pub params: usize,
    pub macc: MaccCount,
    pub memory: MemoryEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl CostReport {
    pub fn new(name: impl Into<String>, t: &Topology) -> Self {
        Self {
            name: name.into(),
            params: t.param_count(),
            macc: count_macc(t),
            memory: estimate_memory(t),
            latency: None,
        }
    }
}

fn kib(bytes: usize) -> f64 {
    bytes as f64 / 1024.0
}

/// Render reports as a fixed-width text table.
pub fn render_cost_table(reports: &[CostReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<18} {:>7} {:>6} {:>12} {:>12} {:>10} {:>14}",
        "model", "params", "MACC", "weights KiB", "activ. KiB", "precision", "median us"
    );
    for r in reports {
        let lat = r
            .latency
            .map_or("-".to_string(), |l| format!("{:.3}", l.median_ns / 1000.0));
        let _ = writeln!(
            s,
            "{:<18} {:>7} {:>6} {:>12.2} {:>12.3} {:>10} {:>14}",
            r.name,
            r.params,
            r.macc.total,
            kib(r.memory.weight_bytes),
            kib(r.memory.activation_bytes),
            format!("{:?}", r.memory.precision).to_lowercase(),
            lat
        );
    }
    let _ = writeln!(
        s,
        "runtime library: {}-{} KiB flash, {}-{} KiB RAM (vendor-reported, not modeled)",
        VENDOR_LIB_FLASH_KIB.0, VENDOR_LIB_FLASH_KIB.1, VENDOR_LIB_RAM_KIB.0, VENDOR_LIB_RAM_KIB.1
    );
    let _ = writeln!(
        s,
        "latency is host wall-clock time and only meaningful relative to other rows"
    );
    s
}
