use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tinyfoc::control::SimTrace;
use tinyfoc::cost::{render_cost_table, CostReport};
use tinyfoc::experiment::{
    case_dataset, run_experiment, simulate, AnyModel, CaseConfig, ExperimentConfig,
};
use tinyfoc::ground_truth::{load_dataset, save_dataset};
use tinyfoc::metrics::compute_metrics;
use tinyfoc::nn::{build_tinyfc, fine_tune, train, Samples, TinyFCModel};
use tinyfoc::opt::hpo::{hpo_search, write_trial_log, Strategy};
use tinyfoc::opt::prune::pca_prune;
use tinyfoc::opt::quant::quantize_int8;
use tinyfoc::plot::plot_trace;
use tinyfoc::{Error, Result};

/// PMSM field-oriented control lab with a learned current corrector.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Experiment config (TOML or JSON). Without it the standard study is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the one in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CaseArg {
    /// Which configured case to use.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    case: u8,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Bayes,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a case, optionally with a corrector, and write trace, plot and metrics.
    Simulate {
        #[command(flatten)]
        case: CaseArg,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Simulate a case under PI control and derive its training set.
    GenGt {
        #[command(flatten)]
        case: CaseArg,
        /// Use this PI-only trace instead of simulating.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a fresh corrector on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Continue training a model on another dataset.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Search network widths, learning rate and batch size.
    Hpo {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Remove redundant neurons by activation PCA.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Post-training int8 quantization.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Closed-loop metrics of a float or int8 model on a case.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        case: CaseArg,
    },
    /// Cost estimates and host latency of models.
    Bench {
        #[arg(long, required = true, num_args = 1..)]
        model: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        runs: usize,
    },
    /// Run the full configured experiment and write the report bundle.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::standard(cli.seed.unwrap_or(0)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn case_of(cfg: &ExperimentConfig, arg: &CaseArg) -> Result<CaseConfig> {
    match arg.case {
        1 => Ok(cfg.case1.clone()),
        _ => cfg
            .case2
            .clone()
            .ok_or_else(|| Error::Config("the config has no case2".into())),
    }
}

fn out_file(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out.join(name))
}

fn write_json<T: serde::Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    let p = out_file(out, name)?;
    std::fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(&p, e))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn samples(path: &Path) -> Result<Samples> {
    Ok(Samples::from(&load_dataset(path)?[..]))
}

fn float_model(path: &Path) -> Result<TinyFCModel> {
    match AnyModel::load(path)? {
        AnyModel::Float(m) => Ok(m),
        AnyModel::Int8(_) => Err(Error::Config(format!(
            "{} is an int8 model; a float model is needed",
            path.display()
        ))),
    }
}

fn save_model(out: &Path, name: &str, m: &TinyFCModel) -> Result<()> {
    let p = out_file(out, name)?;
    m.save(&p)?;
    println!("wrote {} ({} params)", p.display(), m.param_count());
    Ok(())
}

fn save_run(out: &Path, name: &str, trace: &SimTrace) -> Result<()> {
    trace.save_csv(&out_file(out, &format!("{name}.csv"))?)?;
    plot_trace(trace, name, &out_file(out, &format!("{name}.svg"))?)?;
    let m = compute_metrics(trace)?;
    write_json(out, &format!("{name}_metrics.json"), &m)?;
    println!(
        "max deviation {:.4}  avg deviation {:.4}  max overshoot {}",
        m.max_deviation,
        m.avg_deviation,
        m.max_overshoot
            .map_or("undefined".into(), |o| format!("{o:.4}"))
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    let tc = cfg.train_config();
    match &cli.command {
        Command::Simulate { case, model } => {
            let c = case_of(&cfg, case)?;
            let profile = c.profile.build(cfg.duration)?;
            let corrector = model
                .as_deref()
                .map(AnyModel::load)
                .transpose()?
                .map(|m| m.augmentor());
            let name = if corrector.is_some() {
                "augmented"
            } else {
                "pi"
            };
            let trace = simulate(&cfg, &profile, corrector)?;
            save_run(out, &format!("case{}_{name}", case.case), &trace)
        }
        Command::GenGt { case, trace } => {
            let c = case_of(&cfg, case)?;
            let trace = match trace {
                Some(p) => SimTrace::load_csv(p)?,
                None => simulate(&cfg, &c.profile.build(cfg.duration)?, None)?,
            };
            let data = case_dataset(&trace, &c, cfg.detection)?;
            let p = out_file(out, &format!("case{}.csv", case.case))?;
            save_dataset(&data, &p)?;
            println!("wrote {} ({} rows)", p.display(), data.len());
            Ok(())
        }
        Command::Train { data } => {
            let init = build_tinyfc(cfg.model.widths, cfg.seed)?;
            let (m, r) = train(init, &samples(data)?, &tc)?;
            println!(
                "best epoch {}, val mse {:.5}, test mse {:.5}",
                r.best_epoch, r.best_val_mse, r.test_mse
            );
            save_model(out, "model.json", &m)?;
            write_json(out, "train_report.json", &r)
        }
        Command::Finetune { model, data } => {
            let (m, r) = fine_tune(float_model(model)?, &samples(data)?, &tc)?;
            println!("best epoch {}, val mse {:.5}", r.best_epoch, r.best_val_mse);
            save_model(out, "finetuned.json", &m)?;
            write_json(out, "finetune_report.json", &r)
        }
        Command::Hpo {
            data,
            budget,
            strategy,
        } => {
            let section = cfg.hpo.unwrap_or_default();
            let mut space = section.space;
            space.seed = cfg.seed;
            if let Some(b) = budget {
                space.budget = *b;
            }
            match strategy {
                Some(StrategyArg::Bayes) => space.strategy = Strategy::Bayes,
                Some(StrategyArg::Random) => space.strategy = Strategy::Random,
                None => {}
            }
            let all = load_dataset(data)?;
            let subset = tinyfoc::experiment::strided_subset(&all, section.max_rows);
            let base = tinyfoc::nn::TrainConfig {
                epochs: section.epochs,
                ..tc
            };
            let log = out_file(out, "hpo_trials.jsonl")?;
            let res = match hpo_search(&space, &subset, &base) {
                Ok(r) => r,
                Err(e) => {
                    if let Error::HpoAllFailed { log: trials } = &e {
                        write_trial_log(trials, &log)?;
                    }
                    return Err(e);
                }
            };
            write_trial_log(&res.trials, &log)?;
            println!("best {:?}: val mse {:.5}", res.best, res.val_mse);
            save_model(out, "hpo_best.json", &res.model)
        }
        Command::Prune {
            model,
            data,
            threshold,
        } => {
            let mut pc = cfg.prune.unwrap_or_default();
            if let Some(t) = threshold {
                pc.energy_threshold = *t;
            }
            let (m, r) = pca_prune(&float_model(model)?, &samples(data)?, &pc)?;
            println!(
                "{} -> {} params, output change max {:.4} rms {:.4}",
                r.params_before, r.params_after, r.max_output_change, r.rms_output_change
            );
            save_model(out, "pruned.json", &m)?;
            write_json(out, "prune_report.json", &r)
        }
        Command::Quantize { model, data } => {
            let q = quantize_int8(&float_model(model)?, &samples(data)?)?;
            let p = out_file(out, "int8.json")?;
            q.save(&p)?;
            println!(
                "wrote {} ({} weight bytes, error bound {:.4})",
                p.display(),
                q.param_bytes(),
                q.error_bound
            );
            Ok(())
        }
        Command::Evaluate { model, case } => {
            let c = case_of(&cfg, case)?;
            let m = AnyModel::load(model)?;
            let trace = simulate(&cfg, &c.profile.build(cfg.duration)?, Some(m.augmentor()))?;
            save_run(out, &format!("case{}_evaluated", case.case), &trace)
        }
        Command::Bench { model, runs } => {
            let x = [0.5, 0.45, 1.0];
            let mut reports = Vec::new();
            for p in model {
                let m = AnyModel::load(p)?;
                let name = p
                    .file_stem()
                    .map_or("model".into(), |s| s.to_string_lossy().into_owned());
                let mut r = CostReport::new(name, &m.topology());
                r.latency = Some(m.bench(*runs, x)?);
                reports.push(r);
            }
            print!("{}", render_cost_table(&reports));
            write_json(out, "bench.json", &reports)
        }
        Command::Report => {
            run_experiment(&cfg, out)?;
            let summary =
                std::fs::read_to_string(out.join("summary.txt")).map_err(|e| Error::io(out, e))?;
            print!("{summary}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
