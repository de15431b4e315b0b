use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ntg::harness::{self, acceptance, AblationFlags, Dataset, ExperimentConfig, ResetMode, RunRecord, TrainedModels};

#[derive(Parser)]
#[command(name = "ntg", version, about = "Neural task graph experiments")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Opts {
    /// JSON or TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Domain preset used when no config file is given.
    #[arg(long, global = true, default_value = "stacking")]
    domain: String,
    /// Run directory (overrides the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    seen_tasks: Option<usize>,
    #[arg(long, global = true)]
    unseen_tasks: Option<usize>,
    #[arg(long, global = true)]
    demos_per_task: Option<usize>,
    #[arg(long, global = true)]
    experiment_id: Option<String>,
    /// Record wall-clock seconds in metrics (not byte-reproducible).
    #[arg(long, global = true)]
    record_time: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the dataset and supervision tables.
    Gen,
    /// Train every component and write checkpoints.
    Train,
    /// Evaluate on unseen tasks (the config's ablation flags apply).
    Eval {
        /// Retrain and evaluate at each of these seen-task counts instead.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
    /// Full model plus each single-flag ablation.
    Ablate,
    /// Sorting with order-forcing resets.
    SortAlt,
    /// Collection step-count generalization against the flat baseline.
    CollectGen,
    /// NLL of held-out demos under full, no-graph and uniform policies.
    Nll,
    /// Render metrics.csv, summary.txt and DOT graphs from saved runs.
    Export,
    /// Run the acceptance suite.
    Accept {
        /// Only run criteria with these ids.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u32>,
    },
}

fn config(opts: &Opts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(&opts.domain)?,
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(n) = opts.seen_tasks {
        cfg.seen_tasks = n;
    }
    if let Some(n) = opts.unseen_tasks {
        cfg.unseen_tasks = n;
    }
    if let Some(n) = opts.demos_per_task {
        cfg.demos_per_task = n;
    }
    if let Some(id) = &opts.experiment_id {
        cfg.experiment_id = id.clone();
    }
    if opts.out.is_some() {
        cfg.output_dir = opts.out.clone();
    }
    cfg.record_time |= opts.record_time;
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.experiment_id))
}

fn dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let data = dir.join("dataset");
    if data.join("dataset.json").exists() {
        let ds = harness::load_dataset(&data)?;
        if ds.seen.len() != cfg.seen_tasks || ds.unseen.len() != cfg.unseen_tasks || ds.world != cfg.world {
            bail!("{} was built from a different config; rerun `ntg gen`", data.display());
        }
        return Ok(ds);
    }
    gen(cfg, dir)
}

fn gen(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    let ds = harness::build_dataset(cfg)?;
    harness::write_dataset(&ds, &dir.join("dataset"))?;
    std::fs::write(dir.join("config.json"), cfg.to_json() + "\n").with_context(|| format!("writing {}", dir.display()))?;
    log::info!("dataset: {} seen, {} unseen tasks", ds.seen.len(), ds.unseen.len());
    Ok(ds)
}

fn models(dir: &Path) -> Result<TrainedModels> {
    TrainedModels::load(&dir.join("checkpoints")).context("loading checkpoints (run `ntg train` first)")
}

fn finish(dir: &Path, run: &RunRecord) -> Result<()> {
    harness::save_run(dir, run)?;
    for r in &run.runs {
        let mut line = format!("{:<28} {:<10} seen={:<4}", r.condition, r.domain, r.seen_tasks);
        if let Some(s) = r.success_rate() {
            line += &format!(" success={:.3} ({}/{})", s, r.successes(), r.episodes.len());
        }
        if let Some(n) = r.mean_nll {
            line += &format!(" mean_nll={n:.4}");
        }
        println!("{line}");
    }
    harness::export(dir)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = config(&cli.opts)?;
    let dir = run_dir(&cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    match cli.cmd {
        Cmd::Gen => {
            gen(&cfg, &dir)?;
        }
        Cmd::Train => {
            let ds = dataset(&cfg, &dir)?;
            let m = harness::train_all(&cfg, &ds)?;
            m.save(&dir.join("checkpoints"))?;
        }
        Cmd::Eval { sweep } => {
            let ds = dataset(&cfg, &dir)?;
            let run = if sweep.is_empty() {
                let m = models(&dir)?;
                let mut run = RunRecord::new("eval", &cfg);
                run.runs.push(harness::evaluate(
                    &cfg,
                    &m,
                    &ds.world,
                    &ds.unseen,
                    &cfg.ablations,
                    ResetMode::Fresh,
                )?);
                run
            } else {
                harness::data_efficiency_sweep(&cfg, &ds, &sweep)?
            };
            finish(&dir, &run)?;
        }
        Cmd::Ablate => {
            let ds = dataset(&cfg, &dir)?;
            let m = models(&dir)?;
            let mut run = RunRecord::new("ablate", &cfg);
            for flags in AblationFlags::grid() {
                run.runs
                    .push(harness::evaluate(&cfg, &m, &ds.world, &ds.unseen, &flags, ResetMode::Fresh)?);
            }
            finish(&dir, &run)?;
        }
        Cmd::SortAlt => {
            let ds = dataset(&cfg, &dir)?;
            finish(&dir, &harness::alternate_order(&cfg, &models(&dir)?, &ds)?)?;
        }
        Cmd::CollectGen => {
            let ds = dataset(&cfg, &dir)?;
            finish(&dir, &harness::step_generalization(&cfg, &models(&dir)?, &ds)?)?;
        }
        Cmd::Nll => {
            let ds = dataset(&cfg, &dir)?;
            let run = harness::nll_protocol(&cfg, &models(&dir)?, &ds)?;
            for (k, v) in &run.checks {
                println!("{k} = {v:.3e}");
            }
            finish(&dir, &run)?;
        }
        Cmd::Export => {
            let rows = harness::export(&dir)?;
            println!("{} metric rows written to {}", rows.len(), dir.join("metrics.csv").display());
        }
        Cmd::Accept { only } => {
            let results = acceptance::run_suite(&dir, &only)?;
            let mut ok = true;
            for r in &results {
                println!("{r}");
                ok &= r.passed;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE });
        }
    }
    Ok(ExitCode::SUCCESS)
}
