//! Two-branch residual fully connected network.
//!
//! Every branch is a chain of dense layers fed by the normalized input. A
//! layer may add the output of an earlier layer of the same branch to its
//! pre-activation (a residual link; widths must match). The branch outputs are
//! concatenated and reduced by a single merge layer, whose `tanh` activation
//! bounds the network output to `[-1, 1]`. The physical output is that value
//! times `target_scale`.
//!
//! The engine itself allows any number of branches (including none, in which
//! case the merge layer reads the normalized input directly); [`build_tinyfc`]
//! builds the two-branch, five-layer corrector topology.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::Augmentor;
use crate::error::{Error, Result};

/// Version tag written into model files.
pub const ARCH_VERSION: u32 = 1;

/// Inputs: reference speed, measured speed, PI quadrature current.
pub const INPUT_WIDTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    #[inline]
    pub fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub activation: Activation,
    /// Index (within the branch) of an earlier layer whose output is added to
    /// this layer's pre-activation.
    #[serde(default)]
    pub residual_from: Option<usize>,
    /// Source neuron added to each output neuron. `None` means the identity
    /// map, which requires equal widths. Pruning a residual receiver turns
    /// the identity into a selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_index: Option<Vec<usize>>,
}

impl LayerSpec {
    pub fn dense(in_width: usize, out_width: usize, activation: Activation) -> Self {
        Self {
            in_width,
            out_width,
            activation,
            residual_from: None,
            residual_index: None,
        }
    }

    /// Source neuron feeding output `o` through the residual link.
    #[inline]
    pub fn residual_source(&self, o: usize) -> usize {
        self.residual_index.as_ref().map_or(o, |ix| ix[o])
    }
}

/// Dense layer with row-major `out_width x in_width` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(spec: LayerSpec) -> Self {
        Self {
            weights: vec![0.0; spec.in_width * spec.out_width],
            bias: vec![0.0; spec.out_width],
            spec,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f64] {
        let n = self.spec.in_width;
        &self.weights[o * n..(o + 1) * n]
    }

    /// `out = W x + b` (pre-activation, without residual).
    #[inline]
    pub fn affine(&self, x: &[f64], out: &mut [f64]) {
        for (o, slot) in out.iter_mut().enumerate() {
            *slot = self.bias[o] + dot(self.row(o), x);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-feature affine input normalization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Zero-mean, unit-variance map fitted on `rows`. Constant features get a
    /// unit scale.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, width: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; width];
        for r in rows.clone() {
            n += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let nf = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; width];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    #[inline]
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..out.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }
}

/// Per-branch architecture: one entry per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchArch {
    pub widths: Vec<usize>,
    pub residual_from: Vec<Option<usize>>,
}

/// Corrector topology with three free widths: `outer` for layers 0 and 3,
/// `inner` for layers 1 and 2, `head` for the branch output layer 4. Layer 2
/// adds the output of layer 1 and layer 3 adds the output of layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TinyFcWidths {
    pub outer: usize,
    pub inner: usize,
    pub head: usize,
}

impl TinyFcWidths {
    /// Pinned reference widths: 3 -> 12 -> 14 -> 14 -> 12 -> 6 per branch,
    /// merge 12 -> 1, 1,409 parameters.
    pub const REFERENCE: TinyFcWidths = TinyFcWidths {
        outer: 12,
        inner: 14,
        head: 6,
    };

    pub fn branch(&self) -> BranchArch {
        BranchArch {
            widths: vec![self.outer, self.inner, self.inner, self.outer, self.head],
            residual_from: vec![None, None, Some(1), Some(0), None],
        }
    }
}

impl Default for TinyFcWidths {
    fn default() -> Self {
        Self::REFERENCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyFCModel {
    pub input_width: usize,
    pub branches: Vec<Vec<Dense>>,
    pub merge: Dense,
    pub input_norm: Option<Normalization>,
    /// Amps per unit of network output.
    pub target_scale: f64,
}

/// Reusable forward buffers.
#[derive(Debug, Clone, Default)]
pub struct Scratch {
    pub(crate) x: Vec<f64>,
    pub(crate) z: Vec<Vec<Vec<f64>>>,
    pub(crate) h: Vec<Vec<Vec<f64>>>,
    pub(crate) concat: Vec<f64>,
}

impl TinyFCModel {
    /// Build a model with `branches`, each fed by `input_width` inputs, and a
    /// `tanh` merge layer producing one output. Weights are drawn with He
    /// (ReLU) or Glorot (other activations) uniform initialization from a
    /// ChaCha8 stream seeded by `seed`; biases start at zero.
    pub fn build(input_width: usize, branches: &[BranchArch], seed: u64) -> Result<Self> {
        Self::build_with(input_width, branches, Activation::Tanh, seed)
    }

    pub fn build_with(
        input_width: usize,
        branches: &[BranchArch],
        merge_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::Config("input width must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut built = Vec::with_capacity(branches.len());
        for (bi, arch) in branches.iter().enumerate() {
            if arch.widths.is_empty() || arch.widths.len() != arch.residual_from.len() {
                return Err(Error::Config(format!(
                    "branch {bi}: widths/residual length mismatch"
                )));
            }
            let mut layers = Vec::with_capacity(arch.widths.len());
            let mut prev = input_width;
            let last = arch.widths.len() - 1;
            for (li, (&w, &res)) in arch.widths.iter().zip(&arch.residual_from).enumerate() {
                if w == 0 {
                    return Err(Error::Config(format!("branch {bi} layer {li}: zero width")));
                }
                if let Some(r) = res {
                    if r >= li {
                        return Err(Error::Config(format!(
                            "branch {bi} layer {li}: residual source {r} is not an earlier layer"
                        )));
                    }
                    if arch.widths[r] != w {
                        return Err(Error::Config(format!(
                            "branch {bi} layer {li}: residual width {} != output width {w}",
                            arch.widths[r]
                        )));
                    }
                }
                let activation = if li == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                let spec = LayerSpec {
                    in_width: prev,
                    out_width: w,
                    activation,
                    residual_from: res,
                    residual_index: None,
                };
                layers.push(init_dense(spec, &mut rng));
                prev = w;
            }
            built.push(layers);
        }
        let merge_in = if built.is_empty() {
            input_width
        } else {
            built.iter().map(|b| b.last().unwrap().spec.out_width).sum()
        };
        let merge = init_dense(
            LayerSpec {
                in_width: merge_in,
                out_width: 1,
                activation: merge_activation,
                residual_from: None,
                residual_index: None,
            },
            &mut rng,
        );
        Ok(Self {
            input_width,
            branches: built,
            merge,
            input_norm: None,
            target_scale: 1.0,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Every layer in storage order: branch 0, branch 1, ..., merge.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.branches
            .iter()
            .flatten()
            .chain(std::iter::once(&self.merge))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.branches
            .iter_mut()
            .flatten()
            .chain(std::iter::once(&mut self.merge))
    }

    pub fn is_fitted(&self) -> bool {
        self.input_norm.is_some()
    }

    /// Set the merge layer to zero so the model outputs exactly 0.
    pub fn zero_output_layer(&mut self) {
        self.merge.weights.fill(0.0);
        self.merge.bias.fill(0.0);
    }

    pub fn scratch(&self) -> Scratch {
        Scratch {
            x: vec![0.0; self.input_width],
            z: self
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0.0; l.spec.out_width]).collect())
                .collect(),
            h: self
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0.0; l.spec.out_width]).collect())
                .collect(),
            concat: vec![0.0; self.merge.spec.in_width],
        }
    }

    /// Forward pass on an already normalized input; returns the merge
    /// layer's activated output. Intermediate values are left in `s`.
    pub fn forward_normalized(&self, x: &[f64], s: &mut Scratch) -> f64 {
        s.x.copy_from_slice(x);
        let mut offset = 0;
        for (bi, branch) in self.branches.iter().enumerate() {
            for (li, layer) in branch.iter().enumerate() {
                let z = &mut s.z[bi][li];
                let input: &[f64] = if li == 0 { &s.x } else { &s.h[bi][li - 1] };
                layer.affine(input, z);
                if let Some(r) = layer.spec.residual_from {
                    let src = &s.h[bi][r];
                    match &layer.spec.residual_index {
                        None => z.iter_mut().zip(src).for_each(|(zi, hr)| *zi += hr),
                        Some(ix) => z.iter_mut().zip(ix).for_each(|(zi, &j)| *zi += src[j]),
                    }
                }
                let act = layer.spec.activation;
                for (hi, zi) in s.h[bi][li].iter_mut().zip(z.iter()) {
                    *hi = act.apply(*zi);
                }
            }
            let out = branch.last().unwrap();
            let w = out.spec.out_width;
            s.concat[offset..offset + w].copy_from_slice(s.h[bi].last().unwrap());
            offset += w;
        }
        if self.branches.is_empty() {
            s.concat.copy_from_slice(&s.x);
        }
        let z = self.merge.bias[0] + dot(self.merge.row(0), &s.concat);
        self.merge.spec.activation.apply(z)
    }

    fn normalize(&self, input: &[f64], out: &mut [f64]) -> Result<()> {
        let norm = self
            .input_norm
            .as_ref()
            .ok_or_else(|| Error::State("input normalization has not been fitted".into()))?;
        if input.len() != self.input_width {
            return Err(Error::Domain(format!(
                "expected {} inputs, got {}",
                self.input_width,
                input.len()
            )));
        }
        if !input.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain(format!("non-finite input {input:?}")));
        }
        norm.apply(input, out);
        Ok(())
    }

    /// Network output in `[-1, 1]` for a raw (unnormalized) input.
    pub fn forward_unit(&self, input: &[f64]) -> Result<f64> {
        let mut s = self.scratch();
        let mut x = vec![0.0; self.input_width];
        self.normalize(input, &mut x)?;
        Ok(self.forward_normalized(&x, &mut s))
    }

    /// Quadrature-current correction (A) for a raw input.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        Ok(self.forward_unit(input)? * self.target_scale)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            arch_version: ARCH_VERSION,
            input_width: self.input_width,
            layer_specs: LayerSpecs {
                branches: self
                    .branches
                    .iter()
                    .map(|b| b.iter().map(|l| l.spec.clone()).collect())
                    .collect(),
                merge: self.merge.spec.clone(),
            },
            weights: ModelWeights {
                branches: self
                    .branches
                    .iter()
                    .map(|b| {
                        b.iter()
                            .map(|l| LayerWeights {
                                w: l.weights.clone(),
                                b: l.bias.clone(),
                            })
                            .collect()
                    })
                    .collect(),
                merge: LayerWeights {
                    w: self.merge.weights.clone(),
                    b: self.merge.bias.clone(),
                },
            },
            input_norm: self.input_norm.clone(),
            target_scale: self.target_scale,
            param_count: self.param_count(),
        }
    }

    pub fn from_file(f: ModelFile) -> Result<Self> {
        if f.arch_version != ARCH_VERSION {
            return Err(Error::Config(format!(
                "unsupported arch_version {}",
                f.arch_version
            )));
        }
        let bad = |m: String| Error::Config(format!("model file: {m}"));
        if f.layer_specs.branches.len() != f.weights.branches.len() {
            return Err(bad("branch count mismatch".into()));
        }
        let layer = |spec: LayerSpec, w: LayerWeights| -> Result<Dense> {
            if w.w.len() != spec.in_width * spec.out_width || w.b.len() != spec.out_width {
                return Err(bad(format!("tensor shape does not match {spec:?}")));
            }
            Ok(Dense {
                spec,
                weights: w.w,
                bias: w.b,
            })
        };
        let mut branches = Vec::new();
        for (specs, ws) in f.layer_specs.branches.into_iter().zip(f.weights.branches) {
            if specs.len() != ws.len() {
                return Err(bad("layer count mismatch".into()));
            }
            branches.push(
                specs
                    .into_iter()
                    .zip(ws)
                    .map(|(s, w)| layer(s, w))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let model = Self {
            input_width: f.input_width,
            branches,
            merge: layer(f.layer_specs.merge, f.weights.merge)?,
            input_norm: f.input_norm,
            target_scale: f.target_scale,
        };
        model.check_wiring()?;
        if model.param_count() != f.param_count {
            return Err(bad(format!(
                "param_count {} does not match tensors ({})",
                f.param_count,
                model.param_count()
            )));
        }
        Ok(model)
    }

    /// Verify layer chaining and residual shapes.
    pub fn check_wiring(&self) -> Result<()> {
        let bad = |m: String| Error::Config(format!("model wiring: {m}"));
        for (bi, b) in self.branches.iter().enumerate() {
            let mut prev = self.input_width;
            for (li, l) in b.iter().enumerate() {
                if l.spec.in_width != prev {
                    return Err(bad(format!(
                        "branch {bi} layer {li} expects {} inputs, gets {prev}",
                        l.spec.in_width
                    )));
                }
                if let Some(r) = l.spec.residual_from {
                    let ok = r < li
                        && match &l.spec.residual_index {
                            None => b[r].spec.out_width == l.spec.out_width,
                            Some(ix) => {
                                ix.len() == l.spec.out_width
                                    && ix.iter().all(|&j| j < b[r].spec.out_width)
                            }
                        };
                    if !ok {
                        return Err(bad(format!(
                            "branch {bi} layer {li}: bad residual source {r}"
                        )));
                    }
                } else if l.spec.residual_index.is_some() {
                    return Err(bad(format!(
                        "branch {bi} layer {li}: residual index without source"
                    )));
                }
                prev = l.spec.out_width;
            }
        }
        let merge_in = if self.branches.is_empty() {
            self.input_width
        } else {
            self.branches
                .iter()
                .map(|b| b.last().map_or(0, |l| l.spec.out_width))
                .sum()
        };
        if self.merge.spec.in_width != merge_in || self.merge.spec.out_width != 1 {
            return Err(bad("merge layer shape".into()));
        }
        if let Some(n) = &self.input_norm {
            if n.mean.len() != self.input_width || n.std.len() != self.input_width {
                return Err(bad("normalization width".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn init_dense(spec: LayerSpec, rng: &mut ChaCha8Rng) -> Dense {
    let fan_in = spec.in_width as f64;
    let fan_out = spec.out_width as f64;
    let limit = match spec.activation {
        Activation::Relu => (6.0 / fan_in).sqrt(),
        _ => (6.0 / (fan_in + fan_out)).sqrt(),
    };
    let mut d = Dense::zeros(spec);
    for w in d.weights.iter_mut() {
        *w = rng.random_range(-limit..limit);
    }
    d
}

/// Build the corrector with the given widths.
pub fn build_tinyfc(widths: TinyFcWidths, seed: u64) -> Result<TinyFCModel> {
    let arch = widths.branch();
    TinyFCModel::build(INPUT_WIDTH, &[arch.clone(), arch], seed)
}

/// Closed-loop adapter: feeds raw loop signals through the input
/// normalization and returns the unit output. Unfitted models use the
/// identity normalization.
impl Augmentor for TinyFCModel {
    fn correction(&self, omega_ref: f64, omega_meas: f64, iq_pi: f64) -> f64 {
        let raw = [omega_ref, omega_meas, iq_pi];
        let mut x = [0.0; INPUT_WIDTH];
        match &self.input_norm {
            Some(n) => n.apply(&raw, &mut x),
            None => x = raw,
        }
        let mut s = self.scratch();
        self.forward_normalized(&x, &mut s)
    }
}

/// Serialized model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub arch_version: u32,
    pub input_width: usize,
    pub layer_specs: LayerSpecs,
    pub weights: ModelWeights,
    pub input_norm: Option<Normalization>,
    pub target_scale: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpecs {
    pub branches: Vec<Vec<LayerSpec>>,
    pub merge: LayerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub branches: Vec<Vec<LayerWeights>>,
    pub merge: LayerWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}
