//! Hyperparameter search with a Gaussian-process surrogate and expected
//! improvement, or plain random search.
//!
//! The search runs in the unit box `[0, 1]^d`. The first `n_initial` points
//! are uniform random; afterwards a GP with a squared-exponential kernel is
//! fitted to the (standardized) objectives and the next point maximizes
//! expected improvement over a seeded candidate pool. Kernel length scale and
//! noise are picked from a small grid by marginal likelihood, so a run is a
//! pure function of the seed and the objective.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{build_tinyfc, TinyFCModel, TinyFcWidths};
use crate::nn::train::{train, Samples, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Bayes,
    Random,
}

/// One evaluated point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    /// Point in the unit box.
    pub unit: Vec<f64>,
    /// Decoded hyperparameters, when the search is over TinyFC settings.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<HpoConfig>,
    /// Objective value; `None` when the evaluation failed.
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Settings of the generic unit-box search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub budget: usize,
    pub n_initial: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

const CANDIDATES: usize = 2048;
const LENGTH_SCALES: [f64; 6] = [0.05, 0.1, 0.2, 0.35, 0.6, 1.0];
const NOISES: [f64; 3] = [1e-6, 1e-4, 1e-2];

/// Minimize `objective` over `[0, 1]^dim`. Failed evaluations are logged and
/// given a pessimistic surrogate value. Returns the full trial log.
pub fn minimize<F>(dim: usize, settings: SearchSettings, mut objective: F) -> Result<Vec<Trial>>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    if settings.budget < 2 {
        return Err(Error::Config(format!(
            "budget {} must be at least 2",
            settings.budget
        )));
    }
    if dim == 0 {
        return Err(Error::Config("search space has no dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let n_initial = settings.n_initial.clamp(1, settings.budget);
    let mut trials: Vec<Trial> = Vec::with_capacity(settings.budget);
    for index in 0..settings.budget {
        let unit: Vec<f64> = if settings.strategy == Strategy::Random || index < n_initial {
            (0..dim).map(|_| rng.random::<f64>()).collect()
        } else {
            propose(&trials, dim, &mut rng)
        };
        let (objective, error) = match objective(index, &unit) {
            Ok(v) if v.is_finite() => (Some(v), None),
            Ok(v) => (None, Some(format!("non-finite objective {v}"))),
            Err(e) => (None, Some(e.to_string())),
        };
        trials.push(Trial {
            index,
            unit,
            config: None,
            objective,
            error,
        });
    }
    if trials.iter().all(|t| t.objective.is_none()) {
        return Err(Error::HpoAllFailed { log: trials });
    }
    Ok(trials)
}

/// Index of the best successful trial.
pub fn best_trial(trials: &[Trial]) -> Option<&Trial> {
    trials
        .iter()
        .filter(|t| t.objective.is_some())
        .min_by(|a, b| a.objective.unwrap().total_cmp(&b.objective.unwrap()))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct Gp {
    xs: Vec<Vec<f64>>,
    alpha: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    length: f64,
}

impl Gp {
    fn kernel(length: f64, a: &[f64], b: &[f64]) -> f64 {
        (-0.5 * sq_dist(a, b) / (length * length)).exp()
    }

    /// Fit with unit signal variance; returns the log marginal likelihood.
    fn fit(xs: &[Vec<f64>], y: &DVector<f64>, length: f64, noise: f64) -> Option<(Gp, f64)> {
        let n = xs.len();
        let k = DMatrix::from_fn(n, n, |i, j| {
            Self::kernel(length, &xs[i], &xs[j]) + if i == j { noise } else { 0.0 }
        });
        let chol = k.cholesky()?;
        let alpha = chol.solve(y);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det;
        Some((
            Gp {
                xs: xs.to_vec(),
                alpha,
                chol,
                length,
            },
            lml,
        ))
    }

    fn predict(&self, x: &[f64]) -> (f64, f64) {
        let k = DVector::from_iterator(
            self.xs.len(),
            self.xs.iter().map(|xi| Self::kernel(self.length, xi, x)),
        );
        let mean = k.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&k)
            .unwrap_or_else(|| DVector::zeros(k.len()));
        let var = (1.0 - v.dot(&v)).max(1e-12);
        (mean, var.sqrt())
    }
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected improvement below `best` for a Gaussian prediction.
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= 0.0 {
        return (best - mean).max(0.0);
    }
    let z = (best - mean) / sd;
    (best - mean) * normal_cdf(z) + sd * normal_pdf(z)
}

fn propose(trials: &[Trial], dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let ok: Vec<f64> = trials.iter().filter_map(|t| t.objective).collect();
    let random_point =
        |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random::<f64>()).collect::<Vec<f64>>();
    if ok.is_empty() {
        return random_point(rng);
    }
    let worst = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = trials
        .iter()
        .map(|t| t.objective.unwrap_or(worst))
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / raw.len() as f64).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    let y = DVector::from_iterator(raw.len(), raw.iter().map(|v| (v - mean) / sd));
    let xs: Vec<Vec<f64>> = trials.iter().map(|t| t.unit.clone()).collect();

    let mut best_fit: Option<(Gp, f64)> = None;
    for &l in &LENGTH_SCALES {
        for &noise in &NOISES {
            if let Some((gp, lml)) = Gp::fit(&xs, &y, l, noise) {
                if best_fit.as_ref().is_none_or(|(_, b)| lml > *b) {
                    best_fit = Some((gp, lml));
                }
            }
        }
    }
    let Some((gp, _)) = best_fit else {
        return random_point(rng);
    };
    let y_best = y.iter().copied().fold(f64::INFINITY, f64::min);

    // candidate pool: uniform points plus perturbations of the incumbents
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut best = (f64::NEG_INFINITY, random_point(rng));
    for c in 0..CANDIDATES {
        let cand: Vec<f64> = if c % 2 == 0 {
            random_point(rng)
        } else {
            let base = &xs[order[(c / 2) % order.len().min(5)]];
            let step = [0.2, 0.05, 0.01][(c / 2) % 3];
            base.iter()
                .map(|v| (v + step * (rng.random::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0))
                .collect()
        };
        let (m, s) = gp.predict(&cand);
        let ei = expected_improvement(m, s, y_best);
        if ei > best.0 {
            best = (ei, cand);
        }
    }
    best.1
}

pub fn write_trial_log(trials: &[Trial], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in trials {
        let line = serde_json::to_string(t)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_trial_log(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    fn decode(&self, u: f64) -> usize {
        let span = (self.max - self.min) as f64;
        self.min + (u.clamp(0.0, 1.0) * span).round() as usize
    }
}

/// TinyFC search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSpace {
    pub outer: IntRange,
    pub inner: IntRange,
    pub head: IntRange,
    /// `log10` of the learning rate.
    pub log10_lr: (f64, f64),
    /// `log2` of the batch size.
    pub log2_batch: (f64, f64),
    pub budget: usize,
    pub n_initial: usize,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for HpoSpace {
    fn default() -> Self {
        Self {
            outer: IntRange { min: 2, max: 16 },
            inner: IntRange { min: 2, max: 16 },
            head: IntRange { min: 1, max: 8 },
            log10_lr: (-4.0, -2.0),
            log2_batch: (5.0, 9.0),
            budget: 30,
            n_initial: 6,
            seed: 0,
            strategy: Strategy::Bayes,
        }
    }
}

/// Decoded hyperparameters of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpoConfig {
    pub widths: TinyFcWidths,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl HpoSpace {
    pub const DIM: usize = 5;

    pub fn validate(&self) -> Result<()> {
        let ok = |r: IntRange| r.min >= 1 && r.min <= r.max;
        if !(ok(self.outer) && ok(self.inner) && ok(self.head)) {
            return Err(Error::Config(
                "width ranges must be non-empty and start at 1 or more".into(),
            ));
        }
        let real_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !real_ok(self.log10_lr) || !real_ok(self.log2_batch) || self.log2_batch.0 < 0.0 {
            return Err(Error::Config(
                "learning-rate and batch ranges must be non-empty".into(),
            ));
        }
        if self.budget < 2 {
            return Err(Error::Config(format!(
                "budget {} must be at least 2",
                self.budget
            )));
        }
        Ok(())
    }

    pub fn decode(&self, u: &[f64]) -> HpoConfig {
        let lerp = |r: (f64, f64), v: f64| r.0 + v.clamp(0.0, 1.0) * (r.1 - r.0);
        HpoConfig {
            widths: TinyFcWidths {
                outer: self.outer.decode(u[0]),
                inner: self.inner.decode(u[1]),
                head: self.head.decode(u[2]),
            },
            learning_rate: 10f64.powf(lerp(self.log10_lr, u[3])),
            batch_size: 2f64.powf(lerp(self.log2_batch, u[4])).round() as usize,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HpoResult {
    pub best: HpoConfig,
    pub model: TinyFCModel,
    pub val_mse: f64,
    pub trials: Vec<Trial>,
}

/// Search TinyFC widths, learning rate and batch size for the lowest
/// validation MSE. Every trial trains with `base` (epochs, optimizer, split
/// and seed) apart from the searched settings; trial `i` initializes its
/// weights from `space.seed + i`.
pub fn hpo_search(space: &HpoSpace, data: &Samples, base: &TrainConfig) -> Result<HpoResult> {
    space.validate()?;
    let settings = SearchSettings {
        budget: space.budget,
        n_initial: space.n_initial,
        seed: space.seed,
        strategy: space.strategy,
    };
    let mut best: Option<(f64, TinyFCModel)> = None;
    let trials = minimize(HpoSpace::DIM, settings, |index, u| {
        let c = space.decode(u);
        let cfg = TrainConfig {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            ..*base
        };
        let model = build_tinyfc(c.widths, space.seed.wrapping_add(index as u64))?;
        let (model, report) = train(model, data, &cfg)?;
        if best.as_ref().is_none_or(|(b, _)| report.best_val_mse < *b) {
            best = Some((report.best_val_mse, model));
        }
        Ok(report.best_val_mse)
    });
    let decorate = |mut trials: Vec<Trial>| {
        for t in trials.iter_mut() {
            t.config = Some(space.decode(&t.unit));
        }
        trials
    };
    let trials = match trials {
        Ok(t) => decorate(t),
        Err(Error::HpoAllFailed { log }) => return Err(Error::HpoAllFailed { log: decorate(log) }),
        Err(e) => return Err(e),
    };
    let top = best_trial(&trials).expect("at least one trial succeeded");
    let (val_mse, model) = best.expect("at least one trial succeeded");
    Ok(HpoResult {
        best: top.config.expect("decorated"),
        model,
        val_mse,
        trials,
    })
}
