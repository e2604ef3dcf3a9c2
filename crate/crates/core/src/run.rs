//! Run directories and cross-run reports.
//!
//! Every CLI verb writes into one run directory with fixed file names:
//!
//! | file | written by | content |
//! |---|---|---|
//! | `config.resolved.toml` | every verb | the effective config with defaults filled in |
//! | `dataset.bin` | every verb | the generated dataset (see [`crate::tasks`]) |
//! | `metrics.jsonl` | `search` | one [`StepRecord`] per line |
//! | `search_result.json` | `search` | the [`SearchResult`] |
//! | `architecture.json` | `search` | the exported [`Architecture`] |
//! | `oracle_sweep_table.csv` | `oracle-sweep` | one row per feasible candidate, best first |
//! | `evaluation.json` | `evaluate` | an [`Evaluation`] of `architecture.json` |
//! | `.lock` | every verb, while running | the writer's process id |
//!
//! [`report`] reads any number of run directories and never recomputes a
//! metric: every number it prints is copied from one of these files.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::controller::SearchMode;
use crate::error::{NisError, Result};
use crate::model::Metrics;
use crate::oracle::{read_sweep_table, SweepRow};
use crate::search_space::FeatureChoice;
use crate::tasks::{generate, DatasetSplit, TaskKind};
use crate::trainer::{FeatureResult, SearchResult, StepRecord};

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const DATASET_FILE: &str = "dataset.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SEARCH_RESULT_FILE: &str = "search_result.json";
pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const SWEEP_TABLE_FILE: &str = "oracle_sweep_table.csv";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const LOCK_FILE: &str = ".lock";
pub const REPORT_FILE: &str = "report.md";
pub const REPORT_SERIES_FILE: &str = "report_series.csv";

/// An exported architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub task: TaskKind,
    pub mode: SearchMode,
    pub budget: u64,
    pub total_cost: u64,
    pub features: Vec<FeatureResult>,
}

impl Architecture {
    pub fn from_search(task: TaskKind, result: &SearchResult) -> Self {
        Architecture {
            task,
            mode: result.mode,
            budget: result.budget,
            total_cost: result.total_cost,
            features: result.features.clone(),
        }
    }

    pub fn choices(&self) -> Vec<FeatureChoice> {
        self.features.iter().map(|f| f.choice.clone()).collect()
    }
}

/// A fixed architecture retrained from scratch and scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub choices: Vec<FeatureChoice>,
    pub cost: u64,
    pub seed: u64,
    pub steps: usize,
    pub val: Metrics,
    pub test: Metrics,
}

/// An open run directory, exclusively held until dropped.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed and takes its lock. Fails if another
    /// writer holds the lock.
    pub fn open(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| NisError::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                NisError::Config(format!(
                    "{} is locked by another writer (remove {} if that process is gone)",
                    path.display(),
                    lock.display()
                ))
            } else {
                NisError::io(&lock, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| NisError::io(&lock, e))?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        self.write_text(CONFIG_FILE, &config.resolved().to_toml())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(|e| NisError::io(&p, e))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| NisError::Format(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    /// Generates the dataset for `config` and writes it to `dataset.bin`.
    /// Generation is deterministic, so a rerun rewrites identical bytes.
    pub fn dataset(&self, config: &RunConfig) -> Result<DatasetSplit> {
        let data = generate(&config.task, config.seed)?;
        data.write(&self.file(DATASET_FILE))?;
        Ok(data)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| NisError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| NisError::Format(format!("{}: {e}", path.display())))
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| NisError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| NisError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        // A crashed writer may leave a truncated last line.
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}:{}: skipped malformed record: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// One model row of a comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub source: PathBuf,
    pub cost: u64,
    pub metrics: Metrics,
}

/// A ranked sweep, with the rank of each search's converged choice.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub source: PathBuf,
    pub rows: Vec<SweepRow>,
    /// `(row index, run directory)` for each search whose choice appears in the sweep.
    pub marks: Vec<(usize, PathBuf)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub task: Option<TaskKind>,
    pub rows: Vec<ReportRow>,
    pub sweeps: Vec<SweepSection>,
    /// Step series: `(run directory, records)`.
    pub series: Vec<(PathBuf, Vec<StepRecord>)>,
    /// Directories without a finished result, with the reason.
    pub incomplete: Vec<(PathBuf, String)>,
}

fn run_label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

/// Collects every finished result found in `run_dirs`.
pub fn report(run_dirs: &[PathBuf]) -> Result<Report> {
    let mut rep = Report {
        task: None,
        rows: Vec::new(),
        sweeps: Vec::new(),
        series: Vec::new(),
        incomplete: Vec::new(),
    };
    let mut searches: Vec<(PathBuf, Vec<FeatureChoice>)> = Vec::new();
    for dir in run_dirs {
        if !dir.is_dir() {
            rep.incomplete.push((dir.clone(), "not a directory".into()));
            continue;
        }
        if dir.join(LOCK_FILE).exists() {
            rep.incomplete.push((dir.clone(), "locked: a writer is running or crashed".into()));
            continue;
        }
        let config_path = dir.join(CONFIG_FILE);
        let config = match fs::read_to_string(&config_path) {
            Ok(text) => RunConfig::from_toml(&text)?,
            Err(_) => {
                rep.incomplete.push((dir.clone(), format!("no {CONFIG_FILE}")));
                continue;
            }
        };
        match rep.task {
            None => rep.task = Some(config.task.kind),
            Some(k) if k != config.task.kind => {
                return Err(NisError::config("report mixes retrieval and ranking runs"));
            }
            _ => {}
        }
        let label = run_label(dir);
        let mut found = false;
        let result_path = dir.join(SEARCH_RESULT_FILE);
        if result_path.exists() {
            let r: SearchResult = read_json(&result_path)?;
            let name = match r.mode {
                SearchMode::Se => "NIS-SE",
                SearchMode::Me => "NIS-ME",
            };
            rep.rows.push(ReportRow {
                model: format!("{name} ({label})"),
                source: result_path.clone(),
                cost: r.total_cost,
                metrics: r.test_metrics().clone(),
            });
            searches.push((dir.clone(), r.choices()));
            found = true;
        }
        let eval_path = dir.join(EVALUATION_FILE);
        if eval_path.exists() {
            let e: Evaluation = read_json(&eval_path)?;
            rep.rows.push(ReportRow {
                model: format!("retrained ({label})"),
                source: eval_path,
                cost: e.cost,
                metrics: e.test,
            });
            found = true;
        }
        let sweep_path = dir.join(SWEEP_TABLE_FILE);
        if sweep_path.exists() {
            let rows = read_sweep_table(&sweep_path)?;
            if let Some(best) = rows.first() {
                rep.rows.push(ReportRow {
                    model: format!("oracle best ({label})"),
                    source: sweep_path.clone(),
                    cost: best.cost,
                    metrics: Metrics {
                        examples: 0,
                        sampled_recall_at_1: best.test_sampled_recall_at_1,
                        recall_at_1: best.test_recall_at_1,
                        recall_at_5: best.test_recall_at_5,
                        auc: best.test_auc,
                        loss: f64::NAN,
                    },
                });
            }
            rep.sweeps.push(SweepSection {
                source: sweep_path,
                rows,
                marks: Vec::new(),
            });
            found = true;
        }
        let metrics_path = dir.join(METRICS_FILE);
        if metrics_path.exists() {
            rep.series.push((dir.clone(), read_metrics(&metrics_path)?));
        }
        if !found {
            rep.incomplete.push((dir.clone(), "no search result, evaluation, or sweep table".into()));
        }
    }
    for sweep in &mut rep.sweeps {
        for (dir, choices) in &searches {
            if let Some(i) = sweep
                .rows
                .iter()
                .position(|r| r.parsed_choices().map(|c| &c == choices).unwrap_or(false))
            {
                sweep.marks.push((i, dir.clone()));
            }
        }
    }
    Ok(rep)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

impl Report {
    /// Markdown comparison tables.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Comparison\n\n");
        let ranking = self.task == Some(TaskKind::Ranking);
        if ranking {
            s.push_str("| Model | Cost | AUC | Source |\n|---|---|---|---|\n");
        } else {
            s.push_str("| Model | Cost | Recall@1 | Recall@5 | Source |\n|---|---|---|---|---|\n");
        }
        for r in &self.rows {
            let src = r.source.display();
            if ranking {
                let _ = writeln!(s, "| {} | {} | {} | {src} |", r.model, r.cost, fmt_opt(r.metrics.auc));
            } else {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {src} |",
                    r.model,
                    r.cost,
                    fmt_opt(r.metrics.recall_at_1),
                    fmt_opt(r.metrics.recall_at_5)
                );
            }
        }
        for sweep in &self.sweeps {
            let _ = writeln!(s, "\n## Sweep `{}`\n", sweep.source.display());
            s.push_str("| Rank | Choices | Cost | Validation objective | Test | Search |\n|---|---|---|---|---|---|\n");
            for (i, row) in sweep.rows.iter().enumerate() {
                let test = if ranking {
                    fmt_opt(row.test_auc)
                } else {
                    fmt_opt(row.test_sampled_recall_at_1)
                };
                let marks: Vec<String> = sweep
                    .marks
                    .iter()
                    .filter(|(j, _)| *j == i)
                    .map(|(_, d)| format!("converged ({})", run_label(d)))
                    .collect();
                let _ = writeln!(
                    s,
                    "| {} | `{}` | {} | {:.4} | {test} | {} |",
                    row.rank,
                    row.choices,
                    row.cost,
                    row.val_objective,
                    marks.join(", ")
                );
            }
        }
        if !self.incomplete.is_empty() {
            s.push_str("\n## Incomplete runs\n\n");
            for (d, why) in &self.incomplete {
                let _ = writeln!(s, "- `{}`: {why}", d.display());
            }
        }
        s
    }

    /// Step series as CSV, one line per metrics record.
    pub fn series_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["run", "step", "phase", "loss", "objective", "reward", "cost", "entropy"])
            .map_err(|e| NisError::Format(e.to_string()))?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (dir, records) in &self.series {
            for r in records {
                let phase = serde_json::to_value(r.phase).expect("phase serializes");
                w.write_record([
                    run_label(dir),
                    r.step.to_string(),
                    phase.as_str().unwrap_or_default().to_string(),
                    opt(r.loss),
                    opt(r.objective),
                    opt(r.reward),
                    r.cost.to_string(),
                    opt(r.entropy),
                ])
                .map_err(|e| NisError::Format(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| NisError::Format(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `report.md` and `report_series.csv` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| NisError::io(out, e))?;
        let md = out.join(REPORT_FILE);
        fs::write(&md, self.to_markdown()).map_err(|e| NisError::io(&md, e))?;
        let csv_path = out.join(REPORT_SERIES_FILE);
        fs::write(&csv_path, self.series_csv()?).map_err(|e| NisError::io(&csv_path, e))
    }
}
