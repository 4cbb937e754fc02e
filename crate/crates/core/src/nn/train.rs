//! Mini-batch gradient descent on the mean squared error of normalized
//! targets, with dataset splitting and fine-tuning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Normalization, Scratch, TinyFCModel};
use crate::error::{Error, Result};
use crate::ground_truth::DatasetRecord;

/// Mean squared error `1/n * sum (gt - pred)^2`.
pub fn mse(gt: &[f64], pred: &[f64]) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::Domain(format!(
            "length mismatch: {} targets vs {} predictions",
            gt.len(),
            pred.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Domain("mse of an empty sequence".into()));
    }
    let sum: f64 = gt.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / gt.len() as f64)
}

/// Row-major inputs with one scalar target per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub width: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Samples {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            ..Self::default()
        }
    }

    pub fn push(&mut self, input: &[f64], target: f64) {
        debug_assert_eq!(input.len(), self.width);
        self.inputs.extend_from_slice(input);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        let mut s = Samples::new(self.width);
        for &i in idx {
            s.push(self.input(i), self.targets[i]);
        }
        s
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + Clone {
        self.inputs.chunks_exact(self.width)
    }
}

impl From<&[DatasetRecord]> for Samples {
    fn from(records: &[DatasetRecord]) -> Self {
        let mut s = Samples::new(3);
        for r in records {
            s.push(&r.input(), r.delta_iq_gt);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Train / validation / test ratios.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            seed: 0,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        validate_ratios(self.split)
    }
}

fn validate_ratios(r: [f64; 3]) -> Result<()> {
    if r.iter().any(|v| !(*v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 || r[0] <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios {r:?} must be non-negative and sum to 1"
        )));
    }
    Ok(())
}

/// Index sets of a train / validation / test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle `0..n` with a seeded ChaCha8 stream and cut it into
/// `floor(r0 n)`, `floor(r1 n)` and the remainder.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    validate_ratios(ratios)?;
    if n < 10 {
        return Err(Error::TooSmall(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratios[0] * n as f64).floor() as usize;
    let n_val = (ratios[1] * n as f64).floor() as usize;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

pub fn split_dataset<T: Clone>(
    data: &[T],
    ratios: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let s = split_indices(data.len(), ratios, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| data[i].clone()).collect();
    Ok((pick(&s.train), pick(&s.val), pick(&s.test)))
}

/// Per-tensor gradient buffers in [`TinyFCModel::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &TinyFCModel) -> Self {
        Self {
            weights: model.layers().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn clear(&mut self) {
        self.weights.iter_mut().for_each(|g| g.fill(0.0));
        self.bias.iter_mut().for_each(|g| g.fill(0.0));
    }
}

/// Backward buffers.
struct BackScratch {
    dh: Vec<Vec<Vec<f64>>>,
    dz: Vec<f64>,
    dconcat: Vec<f64>,
}

impl BackScratch {
    fn new(model: &TinyFCModel) -> Self {
        let max_w = model.layers().map(|l| l.spec.out_width).max().unwrap_or(1);
        Self {
            dh: model
                .branches
                .iter()
                .map(|b| b.iter().map(|l| vec![0.0; l.spec.out_width]).collect())
                .collect(),
            dz: vec![0.0; max_w],
            dconcat: vec![0.0; model.merge.spec.in_width],
        }
    }
}

/// Accumulate into `g` the gradient of `d_out * y` where `y` is the output of
/// the forward pass whose intermediates are stored in `s`.
fn backward(
    model: &TinyFCModel,
    s: &Scratch,
    y: f64,
    d_out: f64,
    g: &mut Gradients,
    bs: &mut BackScratch,
) {
    let merge_idx = g.weights.len() - 1;
    let merge = &model.merge;
    let z_m = merge.bias[0] + super::model::dot(merge.row(0), &s.concat);
    let dz_m = d_out * merge.spec.activation.derivative(z_m, y);
    for (gw, c) in g.weights[merge_idx].iter_mut().zip(&s.concat) {
        *gw += dz_m * c;
    }
    g.bias[merge_idx][0] += dz_m;
    for (d, w) in bs.dconcat.iter_mut().zip(merge.row(0)) {
        *d = dz_m * w;
    }

    let mut layer_base = 0;
    let mut offset = 0;
    for (bi, branch) in model.branches.iter().enumerate() {
        let n_layers = branch.len();
        for dh in bs.dh[bi].iter_mut() {
            dh.fill(0.0);
        }
        let w_out = branch[n_layers - 1].spec.out_width;
        bs.dh[bi][n_layers - 1].copy_from_slice(&bs.dconcat[offset..offset + w_out]);
        offset += w_out;
        for li in (0..n_layers).rev() {
            let layer = &branch[li];
            let out_w = layer.spec.out_width;
            let in_w = layer.spec.in_width;
            let act = layer.spec.activation;
            let dz = &mut bs.dz[..out_w];
            for o in 0..out_w {
                dz[o] = bs.dh[bi][li][o] * act.derivative(s.z[bi][li][o], s.h[bi][li][o]);
            }
            if let Some(r) = layer.spec.residual_from {
                let src = &mut bs.dh[bi][r];
                for (o, v) in dz.iter().enumerate() {
                    src[layer.spec.residual_source(o)] += v;
                }
            }
            let input: &[f64] = if li == 0 { &s.x } else { &s.h[bi][li - 1] };
            let gw = &mut g.weights[layer_base + li];
            let gb = &mut g.bias[layer_base + li];
            for o in 0..out_w {
                let d = dz[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * in_w..(o + 1) * in_w];
                for (gwi, xi) in row.iter_mut().zip(input) {
                    *gwi += d * xi;
                }
            }
            if li > 0 {
                let (prev, _) = bs.dh[bi].split_at_mut(li);
                let dprev = &mut prev[li - 1];
                for o in 0..out_w {
                    let d = dz[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (dp, w) in dprev.iter_mut().zip(layer.row(o)) {
                        *dp += d * w;
                    }
                }
            }
        }
        layer_base += n_layers;
    }
}

/// Mean squared error of the network output (in normalized units) against
/// `targets` (already normalized) over the rows in `idx`, plus its gradient.
/// Inputs must already be normalized.
pub fn loss_and_grad(model: &TinyFCModel, data: &Samples, idx: &[usize]) -> (f64, Gradients) {
    let mut g = Gradients::zeros_like(model);
    let mut s = model.scratch();
    let mut bs = BackScratch::new(model);
    let n = idx.len() as f64;
    let mut loss = 0.0;
    for &i in idx {
        let y = model.forward_normalized(data.input(i), &mut s);
        let e = y - data.targets[i];
        loss += e * e;
        backward(model, &s, y, 2.0 * e / n, &mut g, &mut bs);
    }
    (loss / n, g)
}

/// Normalized-unit MSE over a prepared (normalized) sample set.
fn eval_mse(model: &TinyFCModel, data: &Samples) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut s = model.scratch();
    let mut sum = 0.0;
    for i in 0..data.len() {
        let y = model.forward_normalized(data.input(i), &mut s);
        let e = y - data.targets[i];
        sum += e * e;
    }
    sum / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Training outcome. All MSE values are in normalized target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn apply_update(
    model: &mut TinyFCModel,
    g: &Gradients,
    cfg: &TrainConfig,
    adam: &mut Option<Adam>,
) {
    let lr = cfg.learning_rate;
    match adam {
        None => {
            for (l, (gw, gb)) in model.layers_mut().zip(g.weights.iter().zip(&g.bias)) {
                l.weights.iter_mut().zip(gw).for_each(|(w, d)| *w -= lr * d);
                l.bias.iter_mut().zip(gb).for_each(|(b, d)| *b -= lr * d);
            }
        }
        Some(a) => {
            a.t += 1;
            let c1 = 1.0 - BETA1.powi(a.t);
            let c2 = 1.0 - BETA2.powi(a.t);
            let step = |p: &mut [f64], d: &[f64], m: &mut [f64], v: &mut [f64]| {
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * d[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * d[i] * d[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            };
            for (k, l) in model.layers_mut().enumerate() {
                step(
                    &mut l.weights,
                    &g.weights[k],
                    &mut a.m.weights[k],
                    &mut a.v.weights[k],
                );
                step(&mut l.bias, &g.bias[k], &mut a.m.bias[k], &mut a.v.bias[k]);
            }
        }
    }
}

fn normalized(data: &Samples, norm: &Normalization, scale: f64) -> Samples {
    let mut out = Samples::new(data.width);
    let mut x = vec![0.0; data.width];
    for i in 0..data.len() {
        norm.apply(data.input(i), &mut x);
        out.push(&x, data.targets[i] / scale);
    }
    out
}

/// How normalization constants are chosen before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fit {
    /// Fit input normalization and target scale on the training split.
    Fresh,
    /// Keep the input normalization; widen the target scale if needed.
    Keep,
}

fn run_training(
    mut model: TinyFCModel,
    data: &Samples,
    cfg: &TrainConfig,
    fit: Fit,
) -> Result<(TinyFCModel, TrainReport)> {
    cfg.validate()?;
    if data.width != model.input_width {
        return Err(Error::Domain(format!(
            "dataset has {} features, model expects {}",
            data.width, model.input_width
        )));
    }
    let split = split_indices(data.len(), cfg.split, cfg.seed)?;
    let train_raw = data.subset(&split.train);
    let max_abs = train_raw.targets.iter().fold(0.0f64, |m, t| m.max(t.abs()));
    match fit {
        Fit::Fresh => {
            model.input_norm = Some(Normalization::fit(train_raw.rows(), data.width));
            model.target_scale = if max_abs > 0.0 { max_abs } else { 1.0 };
        }
        Fit::Keep => {
            if model.input_norm.is_none() {
                return Err(Error::State("fine-tuning requires a fitted model".into()));
            }
            model.target_scale = model.target_scale.max(max_abs);
        }
    }
    let norm = model.input_norm.clone().expect("normalization set above");
    let scale = model.target_scale;
    let train = normalized(&train_raw, &norm, scale);
    let val = normalized(&data.subset(&split.val), &norm, scale);
    let test = normalized(&data.subset(&split.test), &norm, scale);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut g = Gradients::zeros_like(&model);
    let mut s = model.scratch();
    let mut bs = BackScratch::new(&model);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(Adam {
            m: Gradients::zeros_like(&model),
            v: Gradients::zeros_like(&model),
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (f64::INFINITY, 0usize, model.clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            g.clear();
            let n = batch.len() as f64;
            for &i in batch {
                let y = model.forward_normalized(train.input(i), &mut s);
                let e = y - train.targets[i];
                backward(&model, &s, y, 2.0 * e / n, &mut g, &mut bs);
            }
            apply_update(&mut model, &g, cfg, &mut adam);
        }
        let train_mse = eval_mse(&model, &train);
        let val_mse = if val.is_empty() {
            train_mse
        } else {
            eval_mse(&model, &val)
        };
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(EpochStats {
            epoch,
            train_mse,
            val_mse,
        });
        if val_mse < best.0 {
            best = (val_mse, epoch, model.clone());
        }
    }
    let (best_val_mse, best_epoch, model) = best;
    let test_mse = if test.is_empty() {
        f64::NAN
    } else {
        eval_mse(&model, &test)
    };
    Ok((
        model,
        TrainReport {
            history,
            best_epoch,
            best_val_mse,
            test_mse,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
        },
    ))
}

/// Fit normalization on the training split, then minimize the normalized
/// MSE. Returns the checkpoint with the lowest validation MSE.
pub fn train(
    model: TinyFCModel,
    data: &Samples,
    cfg: &TrainConfig,
) -> Result<(TinyFCModel, TrainReport)> {
    run_training(model, data, cfg, Fit::Fresh)
}

pub fn train_records(
    model: TinyFCModel,
    records: &[DatasetRecord],
    cfg: &TrainConfig,
) -> Result<(TinyFCModel, TrainReport)> {
    train(model, &Samples::from(records), cfg)
}

/// Learning-rate factor applied by [`fine_tune`].
pub const FINE_TUNE_LR_FACTOR: f64 = 0.1;

/// Continue training a fitted model on new data at a tenth of the configured
/// learning rate. The input normalization is kept; the target scale only
/// grows if the new targets exceed it.
pub fn fine_tune(
    model: TinyFCModel,
    data: &Samples,
    cfg: &TrainConfig,
) -> Result<(TinyFCModel, TrainReport)> {
    let cfg = TrainConfig {
        learning_rate: cfg.learning_rate * FINE_TUNE_LR_FACTOR,
        ..*cfg
    };
    run_training(model, data, &cfg, Fit::Keep)
}

/// Normalized MSE of a fitted model over raw samples.
pub fn evaluate(model: &TinyFCModel, data: &Samples) -> Result<f64> {
    let norm = model
        .input_norm
        .as_ref()
        .ok_or_else(|| Error::State("model is not fitted".into()))?;
    let prepared = normalized(data, norm, model.target_scale);
    if prepared.is_empty() {
        return Err(Error::Domain("empty sample set".into()));
    }
    Ok(eval_mse(model, &prepared))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{build_tinyfc, Activation, BranchArch, TinyFcWidths};
    use rand::Rng;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 0.0]).unwrap(), 2.5);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    #[test]
    fn mse_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..1000).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a[i] - b[i]).powi(2);
        }
        assert!((mse(&a, &b).unwrap() - acc / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn split_sizes() {
        let s = split_indices(10, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_indices(300_001, [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(
            (s.train.len(), s.val.len(), s.test.len()),
            (240_000, 30_000, 30_001)
        );
        assert!(matches!(
            split_indices(9, [0.8, 0.1, 0.1], 0),
            Err(Error::TooSmall(9))
        ));
        assert!(split_indices(100, [0.8, 0.3, 0.1], 0).is_err());
    }

    #[test]
    fn split_covers_the_original_multiset() {
        let data: Vec<u32> = (0..537).map(|i| i % 50).collect();
        let (a, b, c) = split_dataset(&data, [0.8, 0.1, 0.1], 3).unwrap();
        let mut all: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
        let mut orig = data.clone();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    fn toy_model(seed: u64) -> TinyFCModel {
        let arch = BranchArch {
            widths: vec![3, 3],
            residual_from: vec![None, Some(0)],
        };
        let mut m = TinyFCModel::build(3, &[arch.clone(), arch], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for l in m.layers_mut() {
            l.bias
                .iter_mut()
                .for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        m
    }

    #[test]
    fn gradients_match_central_differences() {
        let m = toy_model(4);
        assert!((45..=60).contains(&m.param_count()), "{}", m.param_count());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut data = Samples::new(3);
        for _ in 0..16 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
            data.push(&x, rng.random_range(-0.8..0.8));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let (_, g) = loss_and_grad(&m, &data, &idx);
        let h = 1e-6;
        let n_layers = m.layers().count();
        let mut checked = 0;
        for k in 0..n_layers {
            for which in 0..2 {
                let len = if which == 0 {
                    g.weights[k].len()
                } else {
                    g.bias[k].len()
                };
                for i in 0..len {
                    let perturb = |delta: f64| {
                        let mut p = m.clone();
                        let l = p.layers_mut().nth(k).unwrap();
                        if which == 0 {
                            l.weights[i] += delta;
                        } else {
                            l.bias[i] += delta;
                        }
                        loss_and_grad(&p, &data, &idx).0
                    };
                    let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
                    let analytic = if which == 0 {
                        g.weights[k][i]
                    } else {
                        g.bias[k][i]
                    };
                    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(
                        (numeric - analytic).abs() / denom <= 1e-4,
                        "layer {k} {} {i}: numeric {numeric} analytic {analytic}",
                        if which == 0 { "w" } else { "b" }
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, m.param_count());
    }

    #[test]
    fn constant_zero_target_with_zero_output_layer() {
        let mut m = build_tinyfc(TinyFcWidths::REFERENCE, 0).unwrap();
        m.zero_output_layer();
        let mut data = Samples::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            data.push(&x, 0.0);
        }
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (m, rep) = train(m, &data, &cfg).unwrap();
        assert_eq!(rep.best_val_mse, 0.0);
        assert!(rep.history.iter().all(|e| e.train_mse == 0.0));
        assert_eq!(evaluate(&m, &data).unwrap(), 0.0);
    }

    #[test]
    fn linear_model_recovers_least_squares_slope() {
        // y = 2x + small noise; closed-form least squares is the oracle
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut data = Samples::new(1);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..2000 {
            let x: f64 = rng.random_range(-1.0..1.0);
            let y = 2.0 * x + rng.random_range(-0.01..0.01);
            xs.push(x);
            ys.push(y);
            data.push(&[x], y);
        }
        let split = split_indices(2000, [0.8, 0.1, 0.1], 5).unwrap();
        let (mx, my) = split
            .train
            .iter()
            .fold((0.0, 0.0), |(a, b), &i| (a + xs[i], b + ys[i]));
        let n = split.train.len() as f64;
        let (mx, my) = (mx / n, my / n);
        let (sxy, sxx) = split.train.iter().fold((0.0, 0.0), |(a, b), &i| {
            (a + (xs[i] - mx) * (ys[i] - my), b + (xs[i] - mx).powi(2))
        });
        let ls_slope = sxy / sxx;
        assert!((ls_slope - 2.0).abs() < 1e-2);

        let m = TinyFCModel::build_with(1, &[], Activation::Identity, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 300,
            batch_size: 2000,
            learning_rate: 0.5,
            optimizer: Optimizer::Sgd,
            seed: 5,
            ..TrainConfig::default()
        };
        let (m, _) = train(m, &data, &cfg).unwrap();
        let slope = m.forward(&[1.0]).unwrap() - m.forward(&[0.0]).unwrap();
        assert!((slope - ls_slope).abs() < 1e-3, "{slope} vs {ls_slope}");
        assert!((slope - 2.0).abs() < 1e-2);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut data = Samples::new(3);
        for _ in 0..300 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t = (x[0] - x[1]).tanh() * 0.5;
            data.push(&x, t);
        }
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train(toy_model(1), &data, &cfg).unwrap();
        let b = train(toy_model(1), &data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn fine_tune_requires_fitted_model() {
        let mut data = Samples::new(3);
        for i in 0..20 {
            data.push(&[i as f64, 0.0, 1.0], 0.1);
        }
        let r = fine_tune(toy_model(0), &data, &TrainConfig::default());
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn diverging_training_is_reported() {
        let mut data = Samples::new(1);
        for i in 0..100 {
            let x = i as f64 / 100.0;
            data.push(&[x], 3.0 * x);
        }
        let m = TinyFCModel::build_with(1, &[], Activation::Identity, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 10,
            learning_rate: 1e3,
            optimizer: Optimizer::Sgd,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(m, &data, &cfg),
            Err(Error::TrainingDiverged { .. })
        ));
    }
}
