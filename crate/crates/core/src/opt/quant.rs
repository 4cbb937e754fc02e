//! Post-training int8 quantization and an integer inference kernel.
//!
//! Weights and biases are quantized symmetrically per tensor,
//! `scale = max|w| / 127`, codes in `[-127, 127]`. Activations (the
//! normalized input and every branch layer output) use an affine int8 map
//! `real = scale * (q - zero_point)` whose range is calibrated by min/max over
//! a calibration set and always contains zero.
//!
//! A layer accumulates `sum w_q * (x_q - zp_x)` in 32 bits, in units of
//! `s_w * s_x`. The bias and the residual term are brought into those units
//! and the accumulator into the output activation's units with fixed-point
//! multipliers (31-bit mantissa plus shift). Every rounding is
//! round-half-even. The merge accumulator is dequantized and passed through
//! `tanh` in floating point.
//!
//! Accumulator range: `|x_q - zp_x| <= 255` and `|w_q| <= 127`, so a row of
//! width `n` contributes at most `32385 n`. [`quantize_int8`] adds the largest
//! possible bias and residual terms and refuses models whose worst case
//! exceeds `i32::MAX`, so the kernel cannot overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Activation, LayerSpec, Normalization, TinyFCModel, ARCH_VERSION};
use crate::nn::train::Samples;

/// Symmetrically quantized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTensor {
    pub codes: Vec<i8>,
    pub scale: f64,
}

impl QTensor {
    pub fn dequantize(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&q| f64::from(q) * self.scale)
            .collect()
    }
}

/// Symmetric per-tensor quantization. An all-zero tensor gets scale 1.
pub fn quantize_symmetric(values: &[f64]) -> QTensor {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { max / 127.0 } else { 1.0 };
    let codes = values
        .iter()
        .map(|v| (v / scale).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    QTensor { codes, scale }
}

/// Affine activation quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub scale: f64,
    pub zero_point: i32,
    /// Calibrated range (widened to include zero).
    pub min: f64,
    pub max: f64,
}

impl ActQuant {
    pub fn from_range(min: f64, max: f64) -> Self {
        let (min, max) = (min.min(0.0), max.max(0.0));
        let scale = if max > min { (max - min) / 255.0 } else { 1.0 };
        let zero_point = (-128.0 - min / scale)
            .round_ties_even()
            .clamp(-128.0, 127.0) as i32;
        Self {
            scale,
            zero_point,
            min,
            max,
        }
    }

    pub fn quantize(&self, x: f64) -> i8 {
        ((x / self.scale).round_ties_even() + f64::from(self.zero_point)).clamp(-128.0, 127.0) as i8
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        self.scale * f64::from(i32::from(q) - self.zero_point)
    }
}

/// Positive real multiplier `m0 * 2^(exponent - 31)` with a 31-bit mantissa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub m0: i32,
    pub exponent: i32,
}

impl FixedMultiplier {
    pub fn from_real(m: f64) -> Self {
        if m <= 0.0 || !m.is_finite() {
            return Self { m0: 0, exponent: 0 };
        }
        let mut e = m.log2().floor() as i32 + 1;
        let mut f = m / 2f64.powi(e);
        if f >= 1.0 {
            f /= 2.0;
            e += 1;
        }
        if f < 0.5 {
            f *= 2.0;
            e -= 1;
        }
        let mut m0 = (f * 2f64.powi(31)).round_ties_even() as i64;
        if m0 == 1 << 31 {
            m0 = 1 << 30;
            e += 1;
        }
        Self {
            m0: m0 as i32,
            exponent: e,
        }
    }

    pub fn to_real(self) -> f64 {
        f64::from(self.m0) * 2f64.powi(self.exponent - 31)
    }

    /// `round_half_even(x * m0 / 2^(31 - exponent))`.
    #[inline]
    pub fn apply(self, x: i64) -> i64 {
        let shift = 31 - self.exponent;
        // fast path: the product fits in 64 bits, which is the common case
        if let (Some(prod), 1..=62) = (x.checked_mul(i64::from(self.m0)), shift) {
            let n = shift as u32;
            let q = prod >> n;
            let r = prod - (q << n);
            let half = 1i64 << (n - 1);
            return if r > half || (r == half && q & 1 == 1) {
                q + 1
            } else {
                q
            };
        }
        let prod = i128::from(x) * i128::from(self.m0);
        if shift <= 0 {
            (prod << (-shift).min(64)) as i64
        } else {
            rounding_shift_right(prod, shift as u32) as i64
        }
    }
}

/// Arithmetic right shift with round-half-even.
#[inline]
pub fn rounding_shift_right(v: i128, n: u32) -> i128 {
    if n == 0 {
        return v;
    }
    if n >= 126 {
        return 0;
    }
    let q = v >> n;
    let r = v - (q << n);
    let half = 1i128 << (n - 1);
    if r > half || (r == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QLayer {
    pub spec: LayerSpec,
    pub weights: QTensor,
    pub bias: QTensor,
    /// Scale of the layer input activation.
    pub input: ActQuant,
    /// Output activation quantization; `None` for the merge layer.
    pub output: Option<ActQuant>,
    pub bias_multiplier: FixedMultiplier,
    pub residual_multiplier: Option<FixedMultiplier>,
    pub output_multiplier: Option<FixedMultiplier>,
}

impl QLayer {
    fn acc_scale(&self) -> f64 {
        self.weights.scale * self.input.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub arch_version: u32,
    pub input_width: usize,
    pub input_norm: Normalization,
    pub input_quant: ActQuant,
    pub branches: Vec<Vec<QLayer>>,
    pub merge: QLayer,
    pub target_scale: f64,
    /// Parameter count of the float model this was derived from.
    pub param_count: usize,
    /// Static bound on `|int8 - float|` of the unit-range output for inputs
    /// whose activations stay inside the calibrated ranges.
    pub error_bound: f64,
}

/// Forward buffers for [`forward_int8`].
#[derive(Debug, Clone, Default)]
pub struct QScratch {
    xq: Vec<i8>,
    h: Vec<Vec<Vec<i8>>>,
    concat: Vec<i8>,
}

impl QuantizedModel {
    pub fn layers(&self) -> impl Iterator<Item = &QLayer> {
        self.branches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.merge))
    }

    /// Stored parameter bytes: one per weight and bias.
    pub fn param_bytes(&self) -> usize {
        self.layers()
            .map(|l| l.weights.codes.len() + l.bias.codes.len())
            .sum()
    }

    pub fn scratch(&self) -> QScratch {
        QScratch {
            xq: vec![0; self.input_width],
            h: self
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0; l.spec.out_width]).collect())
                .collect(),
            concat: vec![0; self.merge.spec.in_width],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.arch_version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "unsupported arch_version {}",
                m.arch_version
            )));
        }
        for l in m.layers() {
            if l.weights.codes.len() != l.spec.in_width * l.spec.out_width
                || l.bias.codes.len() != l.spec.out_width
            {
                return Err(Error::Config(
                    "quantized model: tensor shape mismatch".into(),
                ));
            }
            if !(l.weights.scale > 0.0 && l.bias.scale > 0.0 && l.input.scale > 0.0) {
                return Err(Error::Config(
                    "quantized model: scales must be positive".into(),
                ));
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Integer accumulator of one output neuron.
#[inline]
fn accumulate(l: &QLayer, o: usize, x: &[i8], residual: Option<(&[i8], i32)>) -> i64 {
    let n = l.spec.in_width;
    let zp = l.input.zero_point;
    let row = &l.weights.codes[o * n..(o + 1) * n];
    let mut acc: i32 = 0;
    for (w, xv) in row.iter().zip(x) {
        acc += i32::from(*w) * (i32::from(*xv) - zp);
    }
    let mut acc = i64::from(acc) + l.bias_multiplier.apply(i64::from(l.bias.codes[o]));
    if let (Some((src, zp_r)), Some(m)) = (residual, l.residual_multiplier) {
        acc += m.apply(i64::from(i32::from(src[l.spec.residual_source(o)]) - zp_r));
    }
    acc
}

#[inline]
fn requantize(l: &QLayer, acc: i64) -> i8 {
    let out = l.output.expect("hidden layer has output quantization");
    let m = l
        .output_multiplier
        .expect("hidden layer has output multiplier");
    let mut q = i64::from(out.zero_point) + m.apply(acc);
    if l.spec.activation == Activation::Relu {
        q = q.max(i64::from(out.zero_point));
    }
    q.clamp(-128, 127) as i8
}

/// Integer forward pass on a normalized input; returns the unit-range output.
pub fn forward_int8_normalized(qm: &QuantizedModel, x: &[f64], s: &mut QScratch) -> f64 {
    for (q, v) in s.xq.iter_mut().zip(x) {
        *q = qm.input_quant.quantize(*v);
    }
    let mut offset = 0;
    for (bi, branch) in qm.branches.iter().enumerate() {
        for (li, l) in branch.iter().enumerate() {
            let (before, rest) = s.h[bi].split_at_mut(li);
            let input: &[i8] = if li == 0 { &s.xq } else { &before[li - 1] };
            let residual = l.spec.residual_from.map(|r| {
                let zp = branch[r].output.expect("hidden layer").zero_point;
                (before[r].as_slice(), zp)
            });
            for (o, slot) in rest[0].iter_mut().enumerate() {
                *slot = requantize(l, accumulate(l, o, input, residual));
            }
        }
        let h = s.h[bi].last().unwrap();
        s.concat[offset..offset + h.len()].copy_from_slice(h);
        offset += h.len();
    }
    if qm.branches.is_empty() {
        s.concat.copy_from_slice(&s.xq);
    }
    let acc = accumulate(&qm.merge, 0, &s.concat, None);
    qm.merge
        .spec
        .activation
        .apply(acc as f64 * qm.merge.acc_scale())
}

/// Quadrature-current correction (A) computed with the integer kernel.
pub fn forward_int8(qm: &QuantizedModel, input: &[f64]) -> Result<f64> {
    if input.len() != qm.input_width || !input.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain(format!("bad input {input:?}")));
    }
    let mut x = vec![0.0; qm.input_width];
    qm.input_norm.apply(input, &mut x);
    let mut s = qm.scratch();
    Ok(forward_int8_normalized(qm, &x, &mut s) * qm.target_scale)
}

impl crate::control::Augmentor for QuantizedModel {
    fn correction(&self, omega_ref: f64, omega_meas: f64, iq_pi: f64) -> f64 {
        let mut x = [0.0; 3];
        self.input_norm
            .apply(&[omega_ref, omega_meas, iq_pi], &mut x);
        let mut s = self.scratch();
        forward_int8_normalized(self, &x, &mut s)
    }
}

/// Quantize a float model. Activation ranges are calibrated on the raw
/// `calibration` rows (normalized with the model's own input normalization).
pub fn quantize_int8(model: &TinyFCModel, calibration: &Samples) -> Result<QuantizedModel> {
    if calibration.is_empty() || calibration.width != model.input_width {
        return Err(Error::Domain(
            "calibration set is empty or has the wrong width".into(),
        ));
    }
    let norm = model
        .input_norm
        .clone()
        .unwrap_or_else(|| Normalization::identity(model.input_width));

    // per-neuron min/max calibration
    let empty = |w: usize| vec![(f64::INFINITY, f64::NEG_INFINITY); w];
    let mut in_range = empty(model.input_width);
    let mut ranges: Vec<Vec<Vec<(f64, f64)>>> = model
        .branches
        .iter()
        .map(|b| b.iter().map(|l| empty(l.spec.out_width)).collect())
        .collect();
    let widen = |r: &mut [(f64, f64)], v: &[f64]| {
        for (r, v) in r.iter_mut().zip(v) {
            *r = (r.0.min(*v), r.1.max(*v));
        }
    };
    let mut s = model.scratch();
    let mut x = vec![0.0; model.input_width];
    for row in calibration.rows() {
        norm.apply(row, &mut x);
        widen(&mut in_range, &x);
        model.forward_normalized(&x, &mut s);
        for (bi, b) in ranges.iter_mut().enumerate() {
            for (li, r) in b.iter_mut().enumerate() {
                widen(r, &s.h[bi][li]);
            }
        }
    }
    let tensor = |r: &[(f64, f64)]| {
        let lo = r.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
        let hi = r.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
        ActQuant::from_range(lo, hi)
    };
    let magnitudes =
        |r: &[(f64, f64)]| -> Vec<f64> { r.iter().map(|v| v.0.abs().max(v.1.abs())).collect() };
    let input_quant = tensor(&in_range);
    let mut acts: Vec<Vec<ActQuant>> = ranges
        .iter()
        .map(|b| b.iter().map(|r| tensor(r)).collect())
        .collect();
    // the merge input concatenates the branch heads, so they share one scale
    let head_ranges: Vec<(f64, f64)> = ranges
        .iter()
        .flat_map(|b| b.last().unwrap().clone())
        .collect();
    if !head_ranges.is_empty() {
        let shared = tensor(&head_ranges);
        for b in acts.iter_mut() {
            *b.last_mut().unwrap() = shared;
        }
    }

    // the error vectors bound |quantized - float| per neuron, in real units
    let in_err = vec![input_quant.scale / 2.0; model.input_width];
    let in_mag = magnitudes(&in_range);
    let mut branches = Vec::new();
    let mut merge_err = Vec::new();
    for (bi, branch) in model.branches.iter().enumerate() {
        let mut qb: Vec<QLayer> = Vec::new();
        let mut errs: Vec<Vec<f64>> = Vec::new();
        for (li, l) in branch.iter().enumerate() {
            let (input, mag, e_in) = if li == 0 {
                (input_quant, in_mag.clone(), in_err.as_slice())
            } else {
                (
                    acts[bi][li - 1],
                    magnitudes(&ranges[bi][li - 1]),
                    errs[li - 1].as_slice(),
                )
            };
            let residual = l
                .spec
                .residual_from
                .map(|r| (acts[bi][r], errs[r].as_slice()));
            let (q, e) = quantize_layer(l, input, &mag, e_in, Some(acts[bi][li]), residual)?;
            qb.push(q);
            errs.push(e);
        }
        merge_err.extend(errs.pop().unwrap());
        branches.push(qb);
    }
    let (merge_in, merge_mag) = if model.branches.is_empty() {
        merge_err = in_err;
        (input_quant, in_mag)
    } else {
        (acts[0].last().copied().unwrap(), magnitudes(&head_ranges))
    };
    let (merge, err) = quantize_layer(&model.merge, merge_in, &merge_mag, &merge_err, None, None)?;
    let err = err[0];
    Ok(QuantizedModel {
        arch_version: ARCH_VERSION,
        input_width: model.input_width,
        input_norm: norm,
        input_quant,
        branches,
        merge,
        target_scale: model.target_scale,
        param_count: model.param_count(),
        // both outputs lie in [-1, 1]
        error_bound: (err + 1e-12).min(2.0),
    })
}

/// Quantize one layer and return it with per-neuron bounds on its output
/// error (real units), given bounds on the input magnitudes `x_mag` and input
/// errors `e_in`.
fn quantize_layer(
    l: &crate::nn::model::Dense,
    input: ActQuant,
    x_mag: &[f64],
    e_in: &[f64],
    output: Option<ActQuant>,
    residual: Option<(ActQuant, &[f64])>,
) -> Result<(QLayer, Vec<f64>)> {
    let weights = quantize_symmetric(&l.weights);
    let bias = quantize_symmetric(&l.bias);
    let acc_scale = weights.scale * input.scale;
    let bias_multiplier = FixedMultiplier::from_real(bias.scale / acc_scale);
    let residual_multiplier =
        residual.map(|(r, _)| FixedMultiplier::from_real(r.scale / acc_scale));
    let output_multiplier = output.map(|o| FixedMultiplier::from_real(acc_scale / o.scale));

    let n = l.spec.in_width;
    let w_hat = weights.dequantize();
    let mut worst_acc: i64 = 0;
    let mut errs = Vec::with_capacity(l.spec.out_width);
    for o in 0..l.spec.out_width {
        let row = &l.weights[o * n..(o + 1) * n];
        let row_hat = &w_hat[o * n..(o + 1) * n];
        // W x - W^ x^ = (W - W^) x + W^ (x - x^)
        let mut e = 0.0;
        for c in 0..n {
            e += (row[c] - row_hat[c]).abs() * x_mag[c] + row_hat[c].abs() * e_in[c];
        }
        e += (l.bias[o] - f64::from(bias.codes[o]) * bias.scale).abs() + acc_scale / 2.0;
        let mut acc = 255 * 127 * n as i64 + bias_multiplier.apply(127).abs() + 1;
        if let (Some((_, e_r)), Some(m)) = (residual, residual_multiplier) {
            e += e_r[l.spec.residual_source(o)] + acc_scale / 2.0;
            acc += m.apply(255).abs() + 1;
        }
        if let Some(out) = output {
            e += out.scale / 2.0;
        }
        // relative error of the 31-bit multipliers
        e *= 1.0 + 1e-8;
        worst_acc = worst_acc.max(acc);
        errs.push(e);
    }
    if worst_acc > i64::from(i32::MAX) {
        return Err(Error::Domain(format!(
            "layer {:?} could overflow a 32-bit accumulator ({worst_acc})",
            l.spec
        )));
    }
    Ok((
        QLayer {
            spec: l.spec.clone(),
            weights,
            bias,
            input,
            output,
            bias_multiplier,
            residual_multiplier,
            output_multiplier,
        },
        errs,
    ))
}
