//! Exhaustive candidate sweeps: every feasible architecture trained from
//! scratch with the same seed and step budget, ranked by validation objective.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::controller::SearchMode;
use crate::error::{NisError, Result};
use crate::model::Metrics;
use crate::search_space::{FeatureChoice, GridLayout, MeChoice, SeChoice};
use crate::tasks::DatasetSplit;
use crate::trainer::{objective_of, total_cost, train_fixed, MetricsSink, NullSink};

/// A candidate architecture and whether it fits the budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub choices: Vec<FeatureChoice>,
    pub cost: u64,
    pub feasible: bool,
}

/// All `S*T + 1` single-size actions of one grid, in action-index order,
/// each marked feasible when its cost is within `budget`.
pub fn enumerate_se_candidates(layout: &GridLayout, budget: u64) -> Vec<(SeChoice, u64, bool)> {
    (0..layout.se_action_count())
        .map(|a| {
            let c = SeChoice::from_action_index(a, layout).expect("index in range");
            let cost = FeatureChoice::Se(c).block_cost(layout);
            (c, cost, cost <= budget)
        })
        .collect()
}

/// Largest grid on which multi-size choices are enumerated exhaustively.
pub const ME_ENUMERATION_LIMIT: usize = 3;

/// All `(S+1)^T` multi-size choices of a micro-grid (`S, T <= 3`).
pub fn enumerate_me_candidates(layout: &GridLayout, budget: u64) -> Result<Vec<(MeChoice, u64, bool)>> {
    let (s, t) = (layout.num_row_chunks(), layout.num_col_chunks());
    if s > ME_ENUMERATION_LIMIT || t > ME_ENUMERATION_LIMIT {
        return Err(NisError::config(format!(
            "multi-size enumeration is limited to {ME_ENUMERATION_LIMIT}x{ME_ENUMERATION_LIMIT} grids, got {s}x{t}"
        )));
    }
    let mut out = Vec::new();
    let total = (s + 1).pow(t as u32);
    for mut code in 0..total {
        let depths: Vec<usize> = (0..t)
            .map(|_| {
                let d = code % (s + 1);
                code /= s + 1;
                d
            })
            .collect();
        let c = MeChoice(depths);
        let cost = FeatureChoice::Me(c.clone()).block_cost(layout);
        out.push((c, cost, cost <= budget));
    }
    Ok(out)
}

/// Every combination of per-feature candidates for the config's search
/// mode, with feasibility against the total budget.
pub fn enumerate_candidates(config: &RunConfig) -> Result<Vec<Candidate>> {
    let layouts = config.layouts()?;
    let budget = config.reward.budget;
    let per_feature: Vec<Vec<FeatureChoice>> = layouts
        .iter()
        .map(|l| -> Result<Vec<FeatureChoice>> {
            Ok(match config.search.mode {
                SearchMode::Se => enumerate_se_candidates(l, budget)
                    .into_iter()
                    .map(|(c, _, _)| FeatureChoice::Se(c))
                    .collect(),
                SearchMode::Me => enumerate_me_candidates(l, budget)?
                    .into_iter()
                    .map(|(c, _, _)| FeatureChoice::Me(c))
                    .collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mut combos: Vec<Vec<FeatureChoice>> = vec![Vec::new()];
    for options in &per_feature {
        combos = combos
            .into_iter()
            .flat_map(|prefix| {
                options.iter().map(move |o| {
                    let mut p = prefix.clone();
                    p.push(o.clone());
                    p
                })
            })
            .collect();
    }
    Ok(combos
        .into_iter()
        .map(|choices| {
            let cost = total_cost(&layouts, &choices, config.reward.include_projections);
            Candidate {
                feasible: cost <= budget,
                choices,
                cost,
            }
        })
        .collect())
}

/// The same corner on every feature (or every feature removed), within
/// budget: a mechanized version of picking one vocabulary size and one
/// embedding width for all features by hand.
pub fn uniform_candidates(config: &RunConfig) -> Result<Vec<Candidate>> {
    let layouts = config.layouts()?;
    let first = &layouts[0];
    let (s, t) = (first.num_row_chunks(), first.num_col_chunks());
    if layouts.iter().any(|l| l.num_row_chunks() != s || l.num_col_chunks() != t) {
        return Err(NisError::config("uniform sweep needs every feature on the same S x T grid"));
    }
    let mut out = Vec::new();
    for a in 0..first.se_action_count() {
        let corner = SeChoice::from_action_index(a, first)?;
        let choices: Vec<FeatureChoice> = layouts.iter().map(|_| FeatureChoice::Se(corner)).collect();
        let cost = total_cost(&layouts, &choices, config.reward.include_projections);
        out.push(Candidate {
            feasible: cost <= config.reward.budget,
            choices,
            cost,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub choices: Vec<FeatureChoice>,
    pub cost: u64,
    pub val_objective: f64,
    pub val: Metrics,
    pub test: Metrics,
    pub seed: u64,
    pub steps: usize,
}

/// Trains every feasible candidate and returns the best and all reports.
/// Best is the highest validation objective; ties go to the lower cost.
pub fn sweep(
    config: &RunConfig,
    data: &DatasetSplit,
    candidates: &[Candidate],
    sink: &mut dyn MetricsSink,
) -> Result<(CandidateReport, Vec<CandidateReport>)> {
    let feasible: Vec<&Candidate> = candidates.iter().filter(|c| c.feasible).collect();
    if feasible.len() > config.oracle.max_candidates {
        return Err(NisError::config(format!(
            "{} feasible candidates exceed the sweep limit of {}",
            feasible.len(),
            config.oracle.max_candidates
        )));
    }
    if feasible.is_empty() {
        return Err(NisError::config("no candidate fits the budget"));
    }
    let steps = config.oracle_steps();
    let mut reports = Vec::with_capacity(feasible.len());
    for c in feasible {
        let run = train_fixed(config, data, &c.choices, steps, sink)?;
        let objective = objective_of(&run.val, config.reward.objective);
        if !objective.is_finite() {
            return Err(NisError::Numeric {
                node: 0,
                op: "validation objective",
            });
        }
        log::info!("candidate {:?}: cost {} objective {objective:.4}", c.choices, c.cost);
        reports.push(CandidateReport {
            choices: c.choices.clone(),
            cost: c.cost,
            val_objective: objective,
            val: run.val,
            test: run.test,
            seed: config.seed,
            steps,
        });
    }
    let best = rank(&reports)[0].clone();
    Ok((best, reports))
}

/// Reports sorted best first: objective descending, then cost ascending,
/// then enumeration order.
pub fn rank(reports: &[CandidateReport]) -> Vec<&CandidateReport> {
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        rb.val_objective
            .partial_cmp(&ra.val_objective)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ra.cost.cmp(&rb.cost))
            .then(a.cmp(&b))
    });
    order.into_iter().map(|i| &reports[i]).collect()
}

/// Exhaustive oracle over the config's search space.
pub fn brute_force_best(config: &RunConfig, data: &DatasetSplit) -> Result<(CandidateReport, Vec<CandidateReport>)> {
    sweep(config, data, &enumerate_candidates(config)?, &mut NullSink)
}

/// Best uniform-corner architecture within budget.
pub fn uniform_baseline_sweep(config: &RunConfig, data: &DatasetSplit) -> Result<(CandidateReport, Vec<CandidateReport>)> {
    sweep(config, data, &uniform_candidates(config)?, &mut NullSink)
}

#[derive(Serialize)]
struct TableRow {
    rank: usize,
    choices: String,
    cost: u64,
    val_objective: f64,
    test_sampled_recall_at_1: Option<f64>,
    test_recall_at_1: Option<f64>,
    test_recall_at_5: Option<f64>,
    test_auc: Option<f64>,
    seed: u64,
    steps: usize,
}

/// Writes the sweep as CSV, best candidate first.
pub fn write_sweep_table(path: &Path, reports: &[CandidateReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| NisError::Format(format!("{}: {e}", path.display())))?;
    for (i, r) in rank(reports).into_iter().enumerate() {
        w.serialize(TableRow {
            rank: i + 1,
            choices: serde_json::to_string(&r.choices).expect("choices serialize"),
            cost: r.cost,
            val_objective: r.val_objective,
            test_sampled_recall_at_1: r.test.sampled_recall_at_1,
            test_recall_at_1: r.test.recall_at_1,
            test_recall_at_5: r.test.recall_at_5,
            test_auc: r.test.auc,
            seed: r.seed,
            steps: r.steps,
        })
        .map_err(|e| NisError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| NisError::io(path, e))
}

/// Reads a sweep table written by [`write_sweep_table`].
pub fn read_sweep_table(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| NisError::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| NisError::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub choices: String,
    pub cost: u64,
    pub val_objective: f64,
    pub test_sampled_recall_at_1: Option<f64>,
    pub test_recall_at_1: Option<f64>,
    pub test_recall_at_5: Option<f64>,
    pub test_auc: Option<f64>,
    pub seed: u64,
    pub steps: usize,
}

impl SweepRow {
    pub fn parsed_choices(&self) -> Result<Vec<FeatureChoice>> {
        serde_json::from_str(&self.choices).map_err(|e| NisError::Format(e.to_string()))
    }
}
