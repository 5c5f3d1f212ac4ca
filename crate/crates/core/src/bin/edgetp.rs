use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use edgetp::harness::{build_schedule, read_records, summarize, write_summary_csv, ExperimentConfig, Prepared};
use edgetp::model::{init_model, WeightStore};
use edgetp::sap::{collect_calibration, synthetic_prompts, train, CalibrationSet};
use edgetp::scheduler::CostModel;

/// Tensor-parallel toy transformer inference over a simulated lossy network.
#[derive(Parser)]
#[command(name = "edgetp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set model.num_layers=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for this command; see each subcommand for what it seeds.
    #[arg(long, env = "EDGETP_SEED")]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        Ok(ExperimentConfig::from_toml_with(&text, &self.overrides)?)
    }

    /// Config with `--seed` replacing the run seeds.
    fn load_for_runs(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.load()?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write freshly initialised weights (`--seed` sets the weight seed).
    InitModel {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Record predictor training samples as JSON lines (`--seed` picks the prompts).
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 60)]
        prompts: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train importance predictors from calibration samples (`--seed` seeds training).
    TrainSap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print the schedule for the configured devices and scheduler as TOML.
    Schedule {
        #[command(flatten)]
        common: Common,
    },
    /// Generate once with the base cell on the first device set.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Write stage and token metrics here as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the full experiment matrix and write records.jsonl and summary.csv.
    Matrix {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Rebuild the summary table from a records file.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        /// Defaults to stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_model(cfg: &ExperimentConfig) -> Result<WeightStore> {
    Ok(match &cfg.model_path {
        Some(p) => WeightStore::load(p)?,
        None => init_model(cfg.model)?,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitModel { common, out } => {
            let mut cfg = common.load()?;
            if let Some(s) = common.seed {
                cfg.model.seed = s;
            }
            let store = init_model(cfg.model)?;
            store.save(&out)?;
            eprintln!("wrote {} ({} groups)", out.display(), store.keys().len());
        }
        Command::Calibrate { common, model, prompts, prompt_len, out } => {
            let store = WeightStore::load(&model)?;
            let seed = common.seed.unwrap_or(0);
            let set = collect_calibration(&store, &synthetic_prompts(store.spec(), prompts, prompt_len, seed))?;
            let mut w = create(&out)?;
            set.write_json_lines(&mut w)?;
            w.flush()?;
            eprintln!("wrote {} samples to {}", set.len(), out.display());
        }
        Command::TrainSap { common, model, samples, epochs, out } => {
            let store = WeightStore::load(&model)?;
            let text = std::fs::read_to_string(&samples)?;
            let set = CalibrationSet::read_json_lines(*store.spec(), &text)?;
            let mut tc = common.load()?.sap.map(|s| s.train).unwrap_or_default();
            if let Some(s) = common.seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let (params, report) = train(&set, &tc)?;
            params.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Schedule { common } => {
            let cfg = common.load()?;
            if cfg.devices.is_empty() {
                bail!("schedule needs an explicit device list");
            }
            let store = load_model(&cfg)?;
            let spec = *store.spec();
            let cost = CostModel::from_spec(&spec, cfg.effective_cost_scale(&spec));
            let schedule = build_schedule(cfg.scheduler, &cfg.devices, &spec, &cost)?;
            print!("{}", schedule.to_toml());
        }
        Command::Generate { common, trace } => {
            let cfg = common.load_for_runs()?;
            let prepared = Prepared::new(&cfg)?;
            let cell = prepared.cells()[0];
            let devices = &prepared.device_sets[0].1;
            let seed = cfg.seeds[0];
            let g = prepared.run(&cell, devices, seed)?;
            if let Some(path) = trace {
                let mut w = create(&path)?;
                g.metrics.write_json_lines(&mut w)?;
                w.flush()?;
            }
            let summary = serde_json::json!({
                "prompt": prepared.prompt(seed),
                "tokens": g.tokens,
                "mean_tpt": g.metrics.mean_tpt(),
                "mean_deviation": g.metrics.mean_deviation(),
                "max_relative_error": g.metrics.max_relative_error(),
                "missing_groups": g.metrics.total_missing(),
                "messages": g.messages,
            });
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Matrix { common, out } => {
            let cfg = common.load_for_runs()?;
            let report = Prepared::new(&cfg)?.run_all();
            report.save(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            report.write_summary_csv(std::io::stdout().lock())?;
            let failed = report.records.iter().filter(|r| r.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see records.jsonl", report.records.len());
            }
        }
        Command::Report { common, records, out } => {
            let cfg = common.load()?;
            let recs = read_records(&std::fs::read_to_string(&records)?)?;
            let rows = summarize(&recs, cfg.matrix.baseline.as_ref());
            match out {
                Some(p) => {
                    let mut w = create(&p)?;
                    write_summary_csv(&rows, &mut w)?;
                    w.flush()?;
                }
                None => write_summary_csv(&rows, std::io::stdout().lock())?,
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
