//! Projection pruning driven by the principal components of neuron
//! activations.
//!
//! For a hidden layer the activations over a calibration set are
//! standardized and the eigenvalues of their correlation matrix give the
//! number `k` of components needed to explain the requested fraction of the
//! variance. A greedy pivoted Cholesky factorization of the same matrix picks
//! the `k` neurons that span most of that variance. Every other neuron is
//! regressed (least squares, with intercept) on the kept ones and its outgoing
//! weights are folded into the kept neurons' weights and the consumer's bias,
//! so removing it changes the network only by the regression residual.
//!
//! Only layers whose outputs are not used by a residual link can be pruned.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{Normalization, TinyFCModel};
use crate::nn::train::Samples;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of activation variance to retain, in `(0, 1]`.
    pub energy_threshold: f64,
    /// Maximum number of calibration rows used (evenly strided).
    pub calibration_size: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 0.95,
            calibration_size: 4096,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "energy_threshold {} must lie in (0, 1]",
                self.energy_threshold
            )));
        }
        if self.calibration_size == 0 {
            return Err(Error::Config("calibration_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruning {
    pub branch: usize,
    pub layer: usize,
    pub before: usize,
    pub after: usize,
    /// Principal components needed for the energy threshold.
    pub components: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub energy_threshold: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub layers: Vec<LayerPruning>,
    /// Largest change of the unit-range network output over the calibration
    /// rows.
    pub max_output_change: f64,
    /// Root-mean-square change of the unit-range output over the same rows.
    pub rms_output_change: f64,
}

/// `(branch, layer)` pairs whose outputs feed no residual link.
pub fn prunable_layers(model: &TinyFCModel) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (bi, branch) in model.branches.iter().enumerate() {
        for li in 0..branch.len() {
            if !branch.iter().any(|l| l.spec.residual_from == Some(li)) {
                out.push((bi, li));
            }
        }
    }
    out
}

/// Smallest `k` such that the `k` largest eigenvalues hold at least
/// `threshold` of their total. Negative round-off eigenvalues count as zero.
pub fn components_for_energy(eigenvalues: &[f64], threshold: f64) -> usize {
    let mut ev: Vec<f64> = eigenvalues.iter().map(|e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, e) in ev.iter().enumerate() {
        acc += e;
        if acc >= threshold * total * (1.0 - 1e-12) {
            return i + 1;
        }
    }
    ev.len()
}

/// Greedy pivoted Cholesky column selection on a positive semidefinite
/// matrix: repeatedly take the column with the largest residual diagonal.
pub fn pivoted_cholesky_select(c: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let m = c.nrows();
    let k = k.min(m);
    let mut diag: Vec<f64> = (0..m).map(|i| c[(i, i)]).collect();
    let mut l = DMatrix::<f64>::zeros(m, k);
    let mut chosen = Vec::with_capacity(k);
    for step in 0..k {
        let mut best = None;
        for i in 0..m {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|b: usize| diag[i] > diag[b]) {
                best = Some(i);
            }
        }
        let p = best.expect("k <= m");
        chosen.push(p);
        let piv = diag[p];
        if piv <= 1e-12 {
            continue;
        }
        let root = piv.sqrt();
        for i in 0..m {
            let mut v = c[(i, p)];
            for j in 0..step {
                v -= l[(i, j)] * l[(p, j)];
            }
            l[(i, step)] = v / root;
        }
        for (i, d) in diag.iter_mut().enumerate() {
            *d -= l[(i, step)] * l[(i, step)];
        }
    }
    chosen
}

fn normalized_inputs(
    model: &TinyFCModel,
    calibration: &Samples,
    limit: usize,
) -> Result<Vec<Vec<f64>>> {
    if calibration.width != model.input_width {
        return Err(Error::Domain(format!(
            "calibration rows have {} features, model expects {}",
            calibration.width, model.input_width
        )));
    }
    let n = calibration.len();
    let widest = model.layers().map(|l| l.spec.out_width).max().unwrap_or(1);
    let take = n.min(limit);
    if take < 10 * widest {
        return Err(Error::Domain(format!(
            "calibration set of {take} rows is smaller than 10x the widest layer ({widest})"
        )));
    }
    let identity = Normalization::identity(model.input_width);
    let norm = model.input_norm.as_ref().unwrap_or(&identity);
    let mut out = Vec::with_capacity(take);
    for i in 0..take {
        let row = calibration.input(i * n / take);
        let mut x = vec![0.0; row.len()];
        norm.apply(row, &mut x);
        out.push(x);
    }
    Ok(out)
}

fn unit_outputs(model: &TinyFCModel, xs: &[Vec<f64>]) -> Vec<f64> {
    let mut s = model.scratch();
    xs.iter()
        .map(|x| model.forward_normalized(x, &mut s))
        .collect()
}

/// Prune one layer of `model` in place using normalized calibration inputs
/// `xs`. Returns `None` when the layer is left unchanged.
pub fn prune_layer(
    model: &mut TinyFCModel,
    branch: usize,
    layer: usize,
    xs: &[Vec<f64>],
    threshold: f64,
) -> Result<Option<LayerPruning>> {
    if !prunable_layers(model).contains(&(branch, layer)) {
        return Err(Error::Domain(format!(
            "branch {branch} layer {layer} feeds a residual link and cannot be pruned"
        )));
    }
    if threshold >= 1.0 {
        return Ok(None);
    }
    let m = model.branches[branch][layer].spec.out_width;
    let n = xs.len();

    // activations, n x m
    let mut h = DMatrix::<f64>::zeros(n, m);
    let mut s = model.scratch();
    for (r, x) in xs.iter().enumerate() {
        model.forward_normalized(x, &mut s);
        for (c, v) in s.h[branch][layer].iter().enumerate() {
            h[(r, c)] = *v;
        }
    }
    let mean: Vec<f64> = (0..m).map(|c| h.column(c).mean()).collect();
    let std: Vec<f64> = (0..m)
        .map(|c| {
            (h.column(c)
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>()
                / n as f64)
                .sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..m).filter(|&c| std[c] > 1e-12).collect();

    let (components, keep) = if active.is_empty() {
        (0, vec![0])
    } else {
        let mut z = DMatrix::<f64>::zeros(n, active.len());
        for (a, &c) in active.iter().enumerate() {
            for r in 0..n {
                z[(r, a)] = (h[(r, c)] - mean[c]) / std[c];
            }
        }
        let corr = (z.transpose() * &z) / n as f64;
        let eig = SymmetricEigen::new(corr.clone());
        let k = components_for_energy(eig.eigenvalues.as_slice(), threshold);
        let mut keep: Vec<usize> = pivoted_cholesky_select(&corr, k)
            .into_iter()
            .map(|a| active[a])
            .collect();
        keep.sort_unstable();
        (k, keep)
    };
    if keep.len() == m {
        return Ok(None);
    }
    let removed: Vec<usize> = (0..m).filter(|c| !keep.contains(c)).collect();

    // regress removed activations on [1, kept activations]
    let mut a = DMatrix::<f64>::zeros(n, keep.len() + 1);
    let mut b = DMatrix::<f64>::zeros(n, removed.len());
    for r in 0..n {
        a[(r, 0)] = 1.0;
        for (t, &c) in keep.iter().enumerate() {
            a[(r, t + 1)] = h[(r, c)];
        }
        for (t, &c) in removed.iter().enumerate() {
            b[(r, t)] = h[(r, c)];
        }
    }
    let svd = a.svd(true, true);
    let eps = 1e-10 * svd.singular_values.max().max(1e-300);
    let coef = svd
        .solve(&b, eps)
        .map_err(|e| Error::Domain(format!("pruning regression failed: {e}")))?;

    // fold into the consumer, then drop the removed columns
    let n_layers = model.branches[branch].len();
    let offset = if layer + 1 < n_layers {
        0
    } else {
        model.branches[..branch]
            .iter()
            .map(|b| b.last().unwrap().spec.out_width)
            .sum()
    };
    let consumer = if layer + 1 < n_layers {
        &mut model.branches[branch][layer + 1]
    } else {
        &mut model.merge
    };
    let in_w = consumer.spec.in_width;
    let new_in = in_w - removed.len();
    let mut new_w = Vec::with_capacity(consumer.spec.out_width * new_in);
    for o in 0..consumer.spec.out_width {
        let mut row = consumer.row(o).to_vec();
        for (t, &j) in removed.iter().enumerate() {
            let w = row[offset + j];
            consumer.bias[o] += w * coef[(0, t)];
            for (u, &c) in keep.iter().enumerate() {
                row[offset + c] += w * coef[(u + 1, t)];
            }
        }
        for (c, v) in row.iter().enumerate() {
            let own = c >= offset && c < offset + m;
            if !own || keep.contains(&(c - offset)) {
                new_w.push(*v);
            }
        }
    }
    consumer.weights = new_w;
    consumer.spec.in_width = new_in;

    let target = &mut model.branches[branch][layer];
    let in_w = target.spec.in_width;
    target.weights = keep
        .iter()
        .flat_map(|&c| target.weights[c * in_w..(c + 1) * in_w].to_vec())
        .collect();
    target.bias = keep.iter().map(|&c| target.bias[c]).collect();
    if target.spec.residual_from.is_some() {
        target.spec.residual_index = Some(
            keep.iter()
                .map(|&c| target.spec.residual_source(c))
                .collect(),
        );
    }
    target.spec.out_width = keep.len();
    model.check_wiring()?;
    Ok(Some(LayerPruning {
        branch,
        layer,
        before: m,
        after: keep.len(),
        components,
    }))
}

/// Prune every eligible layer, front to back within each branch, recomputing
/// activations after each layer.
pub fn pca_prune(
    model: &TinyFCModel,
    calibration: &Samples,
    cfg: &PruneConfig,
) -> Result<(TinyFCModel, PruneReport)> {
    cfg.validate()?;
    let xs = normalized_inputs(model, calibration, cfg.calibration_size)?;
    let before = unit_outputs(model, &xs);
    let mut pruned = model.clone();
    let mut layers = Vec::new();
    for (bi, li) in prunable_layers(model) {
        if let Some(p) = prune_layer(&mut pruned, bi, li, &xs, cfg.energy_threshold)? {
            layers.push(p);
        }
    }
    let after = unit_outputs(&pruned, &xs);
    let max_output_change = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let sq: f64 = before
        .iter()
        .zip(&after)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let rms_output_change = (sq / before.len() as f64).sqrt();
    Ok((
        pruned.clone(),
        PruneReport {
            energy_threshold: cfg.energy_threshold,
            params_before: model.param_count(),
            params_after: pruned.param_count(),
            layers,
            max_output_change,
            rms_output_change,
        },
    ))
}
