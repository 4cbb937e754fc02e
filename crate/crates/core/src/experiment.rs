//! End-to-end experiment pipeline.
//!
//! A run simulates the PI-only loop on the training profile, derives the
//! corrected current target, trains the corrector, re-simulates with it and
//! then, as configured, fine-tunes on a second profile, prunes, quantizes and
//! searches hyperparameters. Every stage writes its artifacts as soon as it
//! finishes, so a failing stage leaves the earlier ones on disk. Everything
//! except the optional latency benchmark is a pure function of the config.
//!
//! Output layout:
//!
//! ```text
//! config.toml            resolved configuration
//! traces/<run>.csv       closed-loop traces
//! datasets/<case>.csv    training sets
//! models/<model>.json    float and int8 models
//! plots/<run>.svg        speed and current figures
//! metrics.json           loop metrics, training and optimization summaries
//! cost.json              operation counts and memory estimates
//! hpo_trials.jsonl       one line per search trial
//! bench.json             host latency (only with `bench_runs`)
//! summary.txt            comparison tables
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::control::{run_closed_loop, Augmentor, ControllerConfig, LoopConfig, SimTrace};
use crate::cost::{bench_latency, render_cost_table, CostReport, LatencyStats, Topology};
use crate::error::{Error, Result};
use crate::ground_truth::{make_ground_truth, save_dataset, DatasetRecord, GtMethod, GtParams};
use crate::metrics::{compute_metrics, percent_change, LoopMetrics};
use crate::nn::{
    build_tinyfc, fine_tune, train, Samples, TinyFCModel, TinyFcWidths, TrainConfig, TrainReport,
};
use crate::opt::hpo::{hpo_search, write_trial_log, HpoConfig, HpoSpace};
use crate::opt::prune::{pca_prune, PruneConfig, PruneReport};
use crate::opt::quant::{forward_int8_normalized, quantize_int8, QuantizedModel};
use crate::plant::MotorParams;
use crate::plot::plot_trace;
use crate::profile::{case1_profile, case2_profile, ReferenceProfile, CASE_DURATION};

pub const SCHEMA_VERSION: u32 = 1;

/// Where a reference profile comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProfileSpec {
    /// Step profile drawn from `seed`.
    Case1 {
        seed: u64,
    },
    /// Ramp profile drawn from `seed`.
    Case2 {
        seed: u64,
    },
    Constant {
        target: f64,
    },
    /// JSON profile on disk.
    File {
        path: PathBuf,
    },
}

impl ProfileSpec {
    pub fn build(&self, duration: f64) -> Result<ReferenceProfile> {
        match self {
            ProfileSpec::Case1 { seed } => Ok(case1_profile(*seed)),
            ProfileSpec::Case2 { seed } => Ok(case2_profile(*seed)),
            ProfileSpec::Constant { target } => ReferenceProfile::constant(*target, duration),
            ProfileSpec::File { path } => ReferenceProfile::load(path),
        }
    }
}

/// Speed-loop gains; the current loops keep their plant-derived tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedGains {
    pub kp: f64,
    pub ki: f64,
}

impl Default for SpeedGains {
    fn default() -> Self {
        Self {
            kp: crate::control::DEFAULT_SPEED_KP,
            ki: crate::control::DEFAULT_SPEED_KI,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub profile: ProfileSpec,
    pub gt: GtMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub widths: TinyFcWidths,
    /// Start from this trained model instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            widths: TinyFcWidths::REFERENCE,
            pretrained: None,
        }
    }
}

/// Hyperparameter search settings. Trials train on an evenly strided subset
/// of the training case for a few epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoSection {
    pub space: HpoSpace,
    pub epochs: usize,
    pub max_rows: usize,
}

impl Default for HpoSection {
    fn default() -> Self {
        Self {
            space: HpoSpace::default(),
            epochs: 8,
            max_rows: 20_000,
        }
    }
}

/// Complete experiment description. `seed` has no default: it drives weight
/// initialization, dataset shuffling and the hyperparameter search, and
/// overrides `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default)]
    pub plant: MotorParams,
    #[serde(default)]
    pub pi: SpeedGains,
    #[serde(default)]
    pub detection: GtParams,
    pub case1: CaseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case2: Option<CaseConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneConfig>,
    #[serde(default)]
    pub quantize: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hpo: Option<HpoSection>,
    /// Write every closed-loop trace as CSV.
    #[serde(default = "yes")]
    pub write_traces: bool,
    /// Benchmark host latency of every model with this many timed samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench_runs: Option<usize>,
}

fn default_duration() -> f64 {
    CASE_DURATION
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// The standard two-case study: step profile with threshold targets,
    /// fine-tuning on the ramp profile with rectified targets, pruning and
    /// int8 quantization.
    pub fn standard(seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "standard".into(),
            seed,
            duration: CASE_DURATION,
            plant: MotorParams::default(),
            pi: SpeedGains::default(),
            detection: GtParams::default(),
            case1: CaseConfig {
                profile: ProfileSpec::Case1 { seed },
                gt: GtMethod::Threshold { c: None },
            },
            case2: Some(CaseConfig {
                profile: ProfileSpec::Case2 { seed },
                gt: GtMethod::Rectify { tau: 0.002 },
            }),
            model: ModelSection::default(),
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            prune: Some(PruneConfig::default()),
            quantize: true,
            hpo: None,
            write_traces: true,
            bench_runs: None,
        }
    }

    /// Parse TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn controller(&self) -> ControllerConfig {
        let mut c = ControllerConfig::for_plant(&self.plant);
        c.speed_gains.kp = self.pi.kp;
        c.speed_gains.ki = self.pi.ki;
        c
    }

    /// Training settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        self.plant.validate()?;
        self.controller().validate()?;
        self.train_config().validate()?;
        for case in std::iter::once(&self.case1).chain(self.case2.as_ref()) {
            case.gt.validate()?;
            if let ProfileSpec::File { path } = &case.profile {
                if !path.is_file() {
                    return Err(Error::Config(format!(
                        "profile file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if let Some(p) = &self.model.pretrained {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "pretrained model {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(p) = &self.prune {
            p.validate()?;
        }
        if let Some(h) = &self.hpo {
            h.space.validate()?;
            if h.epochs == 0 || h.max_rows < 10 {
                return Err(Error::Config(
                    "hpo.epochs must be positive and hpo.max_rows at least 10".into(),
                ));
            }
        }
        if self.bench_runs.is_some_and(|n| n < 100) {
            return Err(Error::Config("bench_runs must be at least 100".into()));
        }
        Ok(())
    }
}

/// Training summary in normalized target units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub params: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub test_mse: f64,
    pub history: Vec<crate::nn::train::EpochStats>,
}

impl TrainingSummary {
    fn new(model: &TinyFCModel, r: &TrainReport) -> Self {
        Self {
            params: model.param_count(),
            best_epoch: r.best_epoch,
            best_val_mse: r.best_val_mse,
            test_mse: r.test_mse,
            history: r.history.clone(),
        }
    }
}

/// Relative change of a controlled run against its PI-only baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub max_deviation_pct: Option<f64>,
    pub avg_deviation_pct: Option<f64>,
    pub max_overshoot_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub param_bytes: usize,
    pub error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoSummary {
    pub best: HpoConfig,
    pub val_mse: f64,
    pub params: usize,
    pub trials: usize,
    pub failed_trials: usize,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub runs: BTreeMap<String, LoopMetrics>,
    pub datasets: BTreeMap<String, usize>,
    pub training: BTreeMap<String, TrainingSummary>,
    pub comparisons: Vec<Comparison>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<PruneReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hpo: Option<HpoSummary>,
}

/// Float or int8 corrector loaded from disk.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Float(TinyFCModel),
    Int8(QuantizedModel),
}

impl AnyModel {
    /// Load a model file, telling the two formats apart by content.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("input_quant").is_some() {
            Ok(AnyModel::Int8(QuantizedModel::from_json(&text)?))
        } else {
            Ok(AnyModel::Float(TinyFCModel::from_json(&text)?))
        }
    }

    pub fn augmentor(&self) -> (Arc<dyn Augmentor>, f64) {
        match self {
            AnyModel::Float(m) => (Arc::new(m.clone()), m.target_scale),
            AnyModel::Int8(q) => (Arc::new(q.clone()), q.target_scale),
        }
    }

    pub fn topology(&self) -> Topology {
        match self {
            AnyModel::Float(m) => Topology::from(m),
            AnyModel::Int8(q) => Topology::from(q),
        }
    }

    /// Host latency of one full inference (normalization, network, output
    /// scaling) on `input`, with buffers allocated once up front.
    pub fn bench(&self, n_runs: usize, input: [f64; 3]) -> Result<LatencyStats> {
        let mut x = [0.0; 3];
        match self {
            AnyModel::Float(m) => {
                let identity = crate::nn::Normalization::identity(3);
                let norm = m.input_norm.as_ref().unwrap_or(&identity);
                let mut s = m.scratch();
                bench_latency(n_runs, || {
                    norm.apply(&input, &mut x);
                    m.forward_normalized(&x, &mut s) * m.target_scale
                })
            }
            AnyModel::Int8(q) => {
                let mut s = q.scratch();
                bench_latency(n_runs, || {
                    q.input_norm.apply(&input, &mut x);
                    forward_int8_normalized(q, &x, &mut s) * q.target_scale
                })
            }
        }
    }
}

/// Simulate `profile` with an optional corrector.
pub fn simulate(
    cfg: &ExperimentConfig,
    profile: &ReferenceProfile,
    corrector: Option<(Arc<dyn Augmentor>, f64)>,
) -> Result<SimTrace> {
    let ctl = cfg.controller();
    let lc = match corrector {
        Some((a, scale)) => LoopConfig::augmented(ctl, a, scale),
        None => LoopConfig::pi_only(ctl),
    };
    run_closed_loop(profile, &lc, &cfg.plant, cfg.duration.min(profile.duration))
}

/// Every `n / max_rows`-th record, for cheap search trials.
pub fn strided_subset(records: &[DatasetRecord], max_rows: usize) -> Samples {
    let n = records.len();
    let take = n.min(max_rows.max(1));
    let picked: Vec<DatasetRecord> = (0..take).map(|i| records[i * n / take]).collect();
    Samples::from(&picked[..])
}

struct Bundle<'a> {
    root: &'a Path,
    cfg: &'a ExperimentConfig,
    report: ExperimentReport,
    costs: Vec<CostReport>,
    models: Vec<(String, AnyModel)>,
}

impl Bundle<'_> {
    fn path(&self, sub: &str, file: &str) -> Result<PathBuf> {
        let dir = self.root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir.join(file))
    }

    fn write(&self, sub: &str, file: &str, text: &str) -> Result<()> {
        let p = if sub.is_empty() {
            self.root.join(file)
        } else {
            self.path(sub, file)?
        };
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn record_run(&mut self, name: &str, trace: &SimTrace) -> Result<LoopMetrics> {
        let m = compute_metrics(trace)?;
        if self.cfg.write_traces {
            trace.save_csv(&self.path("traces", &format!("{name}.csv"))?)?;
        }
        plot_trace(trace, name, &self.path("plots", &format!("{name}.svg"))?)?;
        self.report.runs.insert(name.to_string(), m);
        Ok(m)
    }

    fn compare(&mut self, baseline: &str, candidate: &str) {
        let (Some(b), Some(c)) = (
            self.report.runs.get(baseline),
            self.report.runs.get(candidate),
        ) else {
            return;
        };
        let pct = |o: f64, n: f64| percent_change(o, n);
        let cmp = Comparison {
            baseline: baseline.into(),
            candidate: candidate.into(),
            max_deviation_pct: pct(b.max_deviation, c.max_deviation),
            avg_deviation_pct: pct(b.avg_deviation, c.avg_deviation),
            max_overshoot_pct: b
                .max_overshoot
                .zip(c.max_overshoot)
                .and_then(|(o, n)| pct(o, n)),
        };
        self.report.comparisons.push(cmp);
    }

    fn save_model(&mut self, name: &str, model: AnyModel) -> Result<()> {
        let path = self.path("models", &format!("{name}.json"))?;
        match &model {
            AnyModel::Float(m) => m.save(&path)?,
            AnyModel::Int8(q) => q.save(&path)?,
        }
        self.costs.push(CostReport::new(name, &model.topology()));
        self.models.push((name.to_string(), model));
        Ok(())
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Build the training set for one case from its PI-only trace.
pub fn case_dataset(
    trace: &SimTrace,
    case: &CaseConfig,
    params: GtParams,
) -> Result<Vec<DatasetRecord>> {
    Ok(make_ground_truth(trace, case.gt, params)?.records)
}

/// Run the configured pipeline and write the bundle to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentReport> {
    stage("config", cfg.validate())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut b = Bundle {
        root: out,
        cfg,
        report: ExperimentReport {
            name: cfg.name.clone(),
            seed: cfg.seed,
            runs: BTreeMap::new(),
            datasets: BTreeMap::new(),
            training: BTreeMap::new(),
            comparisons: Vec::new(),
            prune: None,
            quant: None,
            hpo: None,
        },
        costs: Vec::new(),
        models: Vec::new(),
    };
    stage(
        "config",
        cfg.to_toml().and_then(|t| b.write("", "config.toml", &t)),
    )?;
    let tc = cfg.train_config();

    // case 1: PI baseline, targets, training, augmented re-run
    let profile1 = stage("simulate", cfg.case1.profile.build(cfg.duration))?;
    let pi1 = stage("simulate", simulate(cfg, &profile1, None))?;
    stage("simulate", b.record_run("case1_pi", &pi1))?;
    let data1 = stage("gen-gt", case_dataset(&pi1, &cfg.case1, cfg.detection))?;
    stage(
        "gen-gt",
        save_dataset(&data1, &b.path("datasets", "case1.csv")?),
    )?;
    b.report.datasets.insert("case1".into(), data1.len());
    let samples1 = Samples::from(&data1[..]);

    let model = match &cfg.model.pretrained {
        Some(p) => stage("train", TinyFCModel::load(p))?,
        None => {
            let init = stage("train", build_tinyfc(cfg.model.widths, cfg.seed))?;
            let (m, r) = stage("train", train(init, &samples1, &tc))?;
            b.report
                .training
                .insert("case1".into(), TrainingSummary::new(&m, &r));
            m
        }
    };
    stage(
        "train",
        b.save_model("case1", AnyModel::Float(model.clone())),
    )?;
    let aug1 = stage(
        "evaluate",
        simulate(
            cfg,
            &profile1,
            Some(AnyModel::Float(model.clone()).augmentor()),
        ),
    )?;
    stage("evaluate", b.record_run("case1_augmented", &aug1))?;
    b.compare("case1_pi", "case1_augmented");

    // case 2: generalization of the case-1 model, then fine-tuning
    if let Some(case2) = &cfg.case2 {
        let profile2 = stage("simulate", case2.profile.build(cfg.duration))?;
        let pi2 = stage("simulate", simulate(cfg, &profile2, None))?;
        stage("simulate", b.record_run("case2_pi", &pi2))?;
        let data2 = stage("gen-gt", case_dataset(&pi2, case2, cfg.detection))?;
        stage(
            "gen-gt",
            save_dataset(&data2, &b.path("datasets", "case2.csv")?),
        )?;
        b.report.datasets.insert("case2".into(), data2.len());
        let run = stage(
            "evaluate",
            simulate(
                cfg,
                &profile2,
                Some(AnyModel::Float(model.clone()).augmentor()),
            ),
        )?;
        stage("evaluate", b.record_run("case2_case1_model", &run))?;
        b.compare("case2_pi", "case2_case1_model");

        let (tuned, r) = stage(
            "finetune",
            fine_tune(model.clone(), &Samples::from(&data2[..]), &tc),
        )?;
        b.report
            .training
            .insert("case2_finetuned".into(), TrainingSummary::new(&tuned, &r));
        stage(
            "finetune",
            b.save_model("case2_finetuned", AnyModel::Float(tuned.clone())),
        )?;
        let run = stage(
            "evaluate",
            simulate(cfg, &profile2, Some(AnyModel::Float(tuned).augmentor())),
        )?;
        stage("evaluate", b.record_run("case2_finetuned", &run))?;
        b.compare("case2_pi", "case2_finetuned");
    }

    if let Some(pc) = &cfg.prune {
        let (pruned, rep) = stage("prune", pca_prune(&model, &samples1, pc))?;
        b.report.prune = Some(rep);
        stage(
            "prune",
            b.save_model("case1_pruned", AnyModel::Float(pruned.clone())),
        )?;
        let run = stage(
            "prune",
            simulate(cfg, &profile1, Some(AnyModel::Float(pruned).augmentor())),
        )?;
        stage("prune", b.record_run("case1_pruned", &run))?;
        b.compare("case1_pi", "case1_pruned");
    }

    if cfg.quantize {
        let q = stage("quantize", quantize_int8(&model, &samples1))?;
        b.report.quant = Some(QuantSummary {
            param_bytes: q.param_bytes(),
            error_bound: q.error_bound,
        });
        stage(
            "quantize",
            b.save_model("case1_int8", AnyModel::Int8(q.clone())),
        )?;
        let run = stage(
            "quantize",
            simulate(cfg, &profile1, Some(AnyModel::Int8(q).augmentor())),
        )?;
        stage("quantize", b.record_run("case1_int8", &run))?;
        b.compare("case1_pi", "case1_int8");
    }

    if let Some(h) = &cfg.hpo {
        let subset = strided_subset(&data1, h.max_rows);
        let space = HpoSpace {
            seed: cfg.seed,
            ..h.space
        };
        let base = TrainConfig {
            epochs: h.epochs,
            ..tc
        };
        let log_path = out.join("hpo_trials.jsonl");
        let res = match hpo_search(&space, &subset, &base) {
            Ok(r) => r,
            Err(e) => {
                // keep the log of a search where every trial failed
                if let Error::HpoAllFailed { log } = &e {
                    let _ = write_trial_log(log, &log_path);
                }
                return stage("hpo", Err(e));
            }
        };
        stage("hpo", write_trial_log(&res.trials, &log_path))?;
        b.report.hpo = Some(HpoSummary {
            best: res.best,
            val_mse: res.val_mse,
            params: res.model.param_count(),
            trials: res.trials.len(),
            failed_trials: res.trials.iter().filter(|t| t.objective.is_none()).count(),
        });
        stage(
            "hpo",
            b.save_model("hpo_best", AnyModel::Float(res.model.clone())),
        )?;
        let run = stage(
            "hpo",
            simulate(cfg, &profile1, Some(AnyModel::Float(res.model).augmentor())),
        )?;
        stage("hpo", b.record_run("case1_hpo", &run))?;
        b.compare("case1_pi", "case1_hpo");
    }

    // reports
    stage(
        "report",
        b.write(
            "",
            "metrics.json",
            &serde_json::to_string_pretty(&b.report)?,
        ),
    )?;
    stage(
        "report",
        b.write("", "cost.json", &serde_json::to_string_pretty(&b.costs)?),
    )?;
    if let Some(n) = cfg.bench_runs {
        let mut timed = b.costs.clone();
        for (r, (_, m)) in timed.iter_mut().zip(&b.models) {
            r.latency = Some(stage("bench", m.bench(n, data1[data1.len() / 2].input()))?);
        }
        stage(
            "bench",
            b.write("", "bench.json", &serde_json::to_string_pretty(&timed)?),
        )?;
        b.costs = timed;
    }
    let summary = render_summary(&b.report, &b.costs);
    stage("report", b.write("", "summary.txt", &summary))?;
    Ok(b.report)
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |v| format!("{v:.digits$}"))
}

/// Text tables: training results, closed-loop metrics with changes against
/// the PI baseline, and deployment cost.
pub fn render_summary(r: &ExperimentReport, costs: &[CostReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (seed {})\n", r.name, r.seed);
    let _ = writeln!(s, "training (normalized MSE)");
    let _ = writeln!(
        s,
        "{:<20} {:>7} {:>7} {:>10} {:>10}",
        "model", "params", "epoch", "val", "test"
    );
    for (name, t) in &r.training {
        let _ = writeln!(
            s,
            "{:<20} {:>7} {:>7} {:>10.5} {:>10.5}",
            name, t.params, t.best_epoch, t.best_val_mse, t.test_mse
        );
    }
    if let Some(h) = &r.hpo {
        let _ = writeln!(
            s,
            "{:<20} {:>7} {:>7} {:>10.5} {:>10}",
            "hpo_best", h.params, "-", h.val_mse, "-"
        );
    }
    if let Some(p) = &r.prune {
        let _ = writeln!(
            s,
            "pruning at {:.2}: {} -> {} params, output change max {:.4} rms {:.4}",
            p.energy_threshold,
            p.params_before,
            p.params_after,
            p.max_output_change,
            p.rms_output_change
        );
    }
    if let Some(q) = &r.quant {
        let _ = writeln!(
            s,
            "int8: {} weight bytes, declared error bound {:.4}",
            q.param_bytes, q.error_bound
        );
    }

    let _ = writeln!(s, "\nclosed loop (per-unit speed)");
    let _ = writeln!(
        s,
        "{:<20} {:>10} {:>10} {:>10} {:>9} {:>9} {:>9}",
        "run", "max dev", "avg dev", "overshoot", "d max%", "d avg%", "d os%"
    );
    for (name, m) in &r.runs {
        let c = r.comparisons.iter().find(|c| &c.candidate == name);
        let _ = writeln!(
            s,
            "{:<20} {:>10.4} {:>10.4} {:>10} {:>9} {:>9} {:>9}",
            name,
            m.max_deviation,
            m.avg_deviation,
            fmt_opt(m.max_overshoot, 4),
            fmt_opt(c.and_then(|c| c.max_deviation_pct), 1),
            fmt_opt(c.and_then(|c| c.avg_deviation_pct), 1),
            fmt_opt(c.and_then(|c| c.max_overshoot_pct), 1),
        );
    }
    let _ = writeln!(s, "\ndeployment cost");
    s.push_str(&render_cost_table(costs));
    s
}
