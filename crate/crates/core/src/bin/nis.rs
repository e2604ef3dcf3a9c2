use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nis::config::RunConfig;
use nis::error::{NisError, Result};
use nis::oracle::{enumerate_candidates, sweep, uniform_candidates, write_sweep_table};
use nis::run::{self, Architecture, Evaluation, RunDir};
use nis::trainer::{run_search, total_cost, train_fixed, JsonlSink, NullSink};

/// Embedding-size search under a parameter budget.
#[derive(Parser)]
#[command(name = "nis", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate the dataset and cache it in the run directory.
    GenData(RunArgs),
    /// Run the joint search and export the converged architecture.
    Search(RunArgs),
    /// Train every feasible candidate from scratch and rank them.
    OracleSweep {
        #[command(flatten)]
        run: RunArgs,
        /// Sweep only the same corner on every feature.
        #[arg(long)]
        uniform: bool,
    },
    /// Retrain an exported architecture from scratch and score it.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to `architecture.json` in the run directory.
        #[arg(long)]
        architecture: Option<PathBuf>,
    },
    /// Compare finished run directories.
    Report {
        /// Where to write `report.md` and `report_series.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file path or preset name.
    #[arg(long)]
    config: String,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn open(&self) -> Result<(RunConfig, RunDir)> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        let dir = RunDir::open(&self.out)?;
        dir.write_config(&config)?;
        Ok((config, dir))
    }
}

fn execute(verb: Verb) -> Result<()> {
    match verb {
        Verb::GenData(args) => {
            let (config, dir) = args.open()?;
            let data = dir.dataset(&config)?;
            println!(
                "{} train / {} val / {} test examples in {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                dir.file(run::DATASET_FILE).display()
            );
        }
        Verb::Search(args) => {
            let (config, dir) = args.open()?;
            let data = dir.dataset(&config)?;
            let mut sink = JsonlSink::create(&dir.file(run::METRICS_FILE))?;
            let result = run_search(&config, &data, &mut sink)?;
            dir.write_json(run::SEARCH_RESULT_FILE, &result)?;
            let arch = Architecture::from_search(config.task.kind, &result);
            dir.write_json(run::ARCHITECTURE_FILE, &arch)?;
            for f in &result.features {
                println!("{}: {:?} cost {}", f.name, f.choice, f.cost);
            }
            println!("total cost {} / budget {}", result.total_cost, result.budget);
        }
        Verb::OracleSweep { run: args, uniform } => {
            let (config, dir) = args.open()?;
            let data = dir.dataset(&config)?;
            let candidates = if uniform {
                uniform_candidates(&config)?
            } else {
                enumerate_candidates(&config)?
            };
            let (best, reports) = sweep(&config, &data, &candidates, &mut NullSink)?;
            write_sweep_table(&dir.file(run::SWEEP_TABLE_FILE), &reports)?;
            println!(
                "{} candidates; best {:?} cost {} validation objective {:.4}",
                reports.len(),
                best.choices,
                best.cost,
                best.val_objective
            );
        }
        Verb::Evaluate { run: args, architecture } => {
            let (config, dir) = args.open()?;
            let path = architecture.unwrap_or_else(|| dir.file(run::ARCHITECTURE_FILE));
            let arch: Architecture = run::read_json(&path)?;
            let choices = arch.choices();
            let layouts = config.layouts()?;
            if choices.len() != layouts.len() {
                return Err(NisError::Config(format!(
                    "{} has {} features, the config has {}",
                    path.display(),
                    choices.len(),
                    layouts.len()
                )));
            }
            let data = dir.dataset(&config)?;
            let steps = config.search.main_steps();
            let fixed = train_fixed(&config, &data, &choices, steps, &mut NullSink)?;
            let eval = Evaluation {
                cost: total_cost(&layouts, &choices, config.reward.include_projections),
                choices,
                seed: config.seed,
                steps,
                val: fixed.val,
                test: fixed.test,
            };
            dir.write_json(run::EVALUATION_FILE, &eval)?;
            println!("{}", serde_json::to_string(&eval.test).expect("metrics serialize"));
        }
        Verb::Report { out, runs } => {
            let rep = run::report(&runs)?;
            rep.write(&out)?;
            print!("{}", rep.to_markdown());
        }
    }
    Ok(())
}

fn error_record(e: &NisError) -> serde_json::Value {
    let path: Option<&Path> = match e {
        NisError::Io { path, .. } => Some(path),
        _ => None,
    };
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "path": path.map(|p| p.display().to_string()),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            match e {
                NisError::Config(_) | NisError::Io { .. } | NisError::Format(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
