//! The joint search loop: warm-up under a frozen controller, then
//! alternating main-model and controller steps, then export and retraining.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_backward, softmax_into};
use crate::config::RunConfig;
use crate::controller::{
    controller_update, derive_final_architecture, sample_record, BaselineNet, ChoiceRecord, ControllerPolicy,
    SearchMode,
};
use crate::error::{NisError, Result};
use crate::model::{evaluate, sample_negatives, Metrics, Model, Selection};
use crate::params::Optimizer;
use crate::reward::{cost_loss, reward, roc_auc, sampled_recall_at_1, ObjectiveKind};
use crate::search_space::{FeatureChoice, GridLayout, GridSpec};
use crate::tasks::{DatasetSplit, Example, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub mode: SearchMode,
    /// Total steps N, main and controller steps together.
    pub steps: usize,
    /// Warm-up length W; defaults to 20% of `steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<usize>,
    /// Training examples per main step.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Validation examples per controller step (b).
    #[serde(default = "default_batch")]
    pub controller_batch: usize,
    /// Main steps between consecutive controller steps after warm-up.
    #[serde(default = "default_ratio")]
    pub main_steps_per_controller_step: usize,
    /// Main-model learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Per-feature grid specs by feature name; unnamed features use `auto`.
    #[serde(default)]
    pub grids: BTreeMap<String, GridSpec>,
    /// Retrain the exported architecture from scratch after the search.
    #[serde(default = "default_true")]
    pub retrain: bool,
    /// Check parameter separation and recompute rewards on every step.
    #[serde(default)]
    pub audit: bool,
}

fn default_batch() -> usize {
    32
}

fn default_ratio() -> usize {
    1
}

fn default_lr() -> f64 {
    1e-3
}

fn default_true() -> bool {
    true
}

impl SearchConfig {
    pub fn warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.steps / 5)
    }

    /// Whether global step `step` (0-based) is a controller step.
    pub fn is_controller_step(&self, step: usize) -> bool {
        let w = self.warmup();
        step >= w && (step - w + 1) % (self.main_steps_per_controller_step + 1) == 0
    }

    /// Number of main-model steps in a full search.
    pub fn main_steps(&self) -> usize {
        (0..self.steps).filter(|&s| !self.is_controller_step(s)).count()
    }
}

/// Which phase a step belonged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
    Controller,
    Retrain,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    /// Embedding cost of the sampled choice (mean over records on controller steps).
    pub cost: f64,
    /// Sampled actions on main steps, argmax actions on controller steps.
    pub actions: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub records: Option<usize>,
}

pub trait MetricsSink {
    fn record(&mut self, record: &StepRecord) -> Result<()>;
}

/// Discards records.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &StepRecord) -> Result<()> {
        Ok(())
    }
}

/// Keeps records in memory.
#[derive(Default)]
pub struct VecSink(pub Vec<StepRecord>);

impl MetricsSink for VecSink {
    fn record(&mut self, record: &StepRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Appends one JSON object per line, flushed after every record.
pub struct JsonlSink {
    path: std::path::PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| NisError::io(path, e))?;
        Ok(JsonlSink {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| NisError::Format(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| NisError::io(&self.path, e))
    }
}

/// Total embedding cost of one choice per feature.
pub fn total_cost(layouts: &[GridLayout], choices: &[FeatureChoice], include_projections: bool) -> u64 {
    layouts
        .iter()
        .zip(choices)
        .map(|(l, c)| c.cost(l, include_projections))
        .sum()
}

/// Independent random streams of one search, all derived from the run seed.
struct Streams {
    batches: ChaCha8Rng,
    choices: ChaCha8Rng,
    val: ChaCha8Rng,
    negatives: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Fresh random stream for evaluation negatives, identical across every
/// model evaluated under the same seed.
pub fn eval_rng(seed: u64, split: &str) -> ChaCha8Rng {
    stream(seed, if split == "test" { 11 } else { 10 })
}

/// Counters kept in audit mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Steps that changed parameters they must not touch.
    pub separation_violations: usize,
    pub separation_checks: usize,
    /// Rewards whose independent recomputation disagreed.
    pub reward_mismatches: usize,
    pub reward_checks: usize,
}

/// Mutable state of one search.
pub struct SearchState<'d> {
    config: RunConfig,
    data: &'d DatasetSplit,
    layouts: Vec<GridLayout>,
    pub model: Model,
    pub policy: ControllerPolicy,
    pub baseline: BaselineNet,
    streams: Streams,
    step: usize,
    main_steps: usize,
    controller_steps: usize,
    skipped_controller_steps: usize,
    block_touched: Vec<bool>,
    trace: Vec<TracePoint>,
    pub audit: AuditReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub objective: f64,
    pub reward: f64,
    pub cost: f64,
}

impl<'d> SearchState<'d> {
    pub fn new(config: &RunConfig, data: &'d DatasetSplit) -> Result<Self> {
        config.validate()?;
        let layouts = config.layouts()?;
        for (f, l) in layouts.iter().enumerate() {
            if !l.has_tall_blocks() {
                log::warn!(
                    "feature {}: some row chunk has no more rows than the grid width {}",
                    config.task.features[f].name,
                    l.dim()
                );
            }
        }
        if config.search.warmup() == 0 {
            log::warn!("warm-up is disabled; the controller starts on untrained blocks");
        }
        if data.vocabs != config.task.features.iter().map(|f| f.vocab).collect::<Vec<_>>() {
            return Err(NisError::config("dataset vocabularies do not match the config"));
        }
        let mut init = stream(config.seed, 4);
        let model = Model::for_search(
            config.task.kind,
            &layouts,
            config.task.num_labels(),
            &config.model,
            &mut init,
        )?;
        model.validate_examples(&data.train)?;
        model.validate_examples(&data.val)?;
        let policy = ControllerPolicy::new(config.search.mode, layouts.clone())?;
        let baseline = BaselineNet::new(&policy)?;
        let blocks: usize = layouts.iter().map(|l| l.num_row_chunks() * l.num_col_chunks()).sum();
        Ok(SearchState {
            config: config.clone(),
            data,
            layouts,
            model,
            policy,
            baseline,
            streams: Streams {
                batches: stream(config.seed, 5),
                choices: stream(config.seed, 6),
                val: stream(config.seed, 7),
                negatives: stream(config.seed, 8),
            },
            step: 0,
            main_steps: 0,
            controller_steps: 0,
            skipped_controller_steps: 0,
            block_touched: vec![false; blocks],
            trace: Vec::new(),
            audit: AuditReport::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn layouts(&self) -> &[GridLayout] {
        &self.layouts
    }

    /// Fraction of embedding blocks that received a nonzero gradient so far.
    pub fn block_coverage(&self) -> f64 {
        self.block_touched.iter().filter(|&&t| t).count() as f64 / self.block_touched.len() as f64
    }

    fn controller_checksum(&self) -> (u64, u64) {
        (self.policy.checksum(), self.baseline.checksum())
    }

    fn choice_cost(&self, choices: &[FeatureChoice]) -> u64 {
        total_cost(&self.layouts, choices, self.config.reward.include_projections)
    }

    /// Runs `steps` warm-up main steps under the frozen controller.
    pub fn warmup_phase(&mut self, steps: usize, sink: &mut dyn MetricsSink) -> Result<()> {
        if self.step != 0 {
            return Err(NisError::contract("warm-up must start at step 0"));
        }
        let before = self.controller_checksum();
        for _ in 0..steps {
            self.train_step_main(Phase::Warmup, sink)?;
        }
        if self.controller_checksum() != before {
            self.audit.separation_violations += 1;
        }
        self.audit.separation_checks += 1;
        Ok(())
    }

    /// One main-model step on a training batch under one sampled choice set.
    pub fn train_step_main(&mut self, phase: Phase, sink: &mut dyn MetricsSink) -> Result<f64> {
        let (actions, _) = self.policy.sample_actions(&mut self.streams.choices);
        let choices = self.policy.choices_for(&actions)?;
        let n = self.data.train.len();
        let batch: Vec<&Example> = (0..self.config.search.batch_size)
            .map(|_| &self.data.train[self.streams.batches.random_range(0..n)])
            .collect();
        let controller_before = self.config.search.audit.then(|| self.controller_checksum());
        let model = &self.model;
        let neg_rng = &mut self.streams.negatives;
        let (loss, grads) = forward_backward(model.store(), |t| Ok(model.loss(t, &batch, Selection::Shared(&choices), neg_rng)))
            .map_err(|e| {
                log::error!("main step {} failed under choices {choices:?}: {e}", self.step);
                e
            })?;
        let mut k = 0;
        for f in 0..self.layouts.len() {
            if let Some(g) = self.model.grid(f) {
                let l = g.layout();
                for s in 0..l.num_row_chunks() {
                    for t in 0..l.num_col_chunks() {
                        if grads.touches(g.block(s, t)) {
                            self.block_touched[k] = true;
                        }
                        k += 1;
                    }
                }
            }
        }
        let lr = self.config.search.lr;
        let opt = self.config.search.optimizer;
        self.model.store_mut().apply_gradients(&grads, lr, &opt)?;
        if let Some(before) = controller_before {
            self.audit.separation_checks += 1;
            if self.controller_checksum() != before {
                self.audit.separation_violations += 1;
            }
        }
        sink.record(&StepRecord {
            step: self.step,
            phase,
            loss: Some(loss),
            objective: None,
            reward: None,
            cost: self.choice_cost(&choices) as f64,
            actions,
            entropy: None,
            records: None,
        })?;
        self.step += 1;
        self.main_steps += 1;
        Ok(loss)
    }

    /// One controller step on a validation batch. Returns the mean reward,
    /// or `None` when every record had to be skipped.
    pub fn train_step_controller(&mut self, sink: &mut dyn MetricsSink) -> Result<Option<f64>> {
        let b = self.config.search.controller_batch;
        let n = self.data.val.len();
        let batch: Vec<&Example> = (0..b)
            .map(|_| &self.data.val[self.streams.val.random_range(0..n)])
            .collect();
        let group = match self.config.task.kind {
            TaskKind::Retrieval => 1,
            TaskKind::Ranking => self.config.reward.auc_group,
        };
        let mut records: Vec<ChoiceRecord> = (0..b / group)
            .map(|_| sample_record(&self.policy, &self.baseline, &mut self.streams.choices))
            .collect();
        let per_example: Vec<&[FeatureChoice]> = (0..b).map(|i| records[i / group].choices.as_slice()).collect();
        let main_before = self.config.search.audit.then(|| self.model.store().checksum());
        let scores = self.model.scores(&batch, Selection::PerExample(&per_example));

        let budget = self.config.reward.budget;
        let objective = self.config.reward.objective;
        let negatives = self.config.reward.negatives;
        let mut kept = Vec::with_capacity(records.len());
        let mut objectives = Vec::new();
        let mut audit_negs: Option<Vec<usize>> = None;
        for (r, rec) in records.iter_mut().enumerate() {
            let rows = r * group..(r + 1) * group;
            let o = match (self.config.task.kind, objective) {
                (TaskKind::Retrieval, ObjectiveKind::SampledRecallAt1) => {
                    let y = batch[r].label as usize;
                    let negs = sample_negatives(y, scores.cols(), negatives, &mut self.streams.negatives);
                    let row = scores.row(r);
                    let neg_logits: Vec<f64> = negs.iter().map(|&j| row[j]).collect();
                    if r == 0 {
                        audit_negs = Some(negs);
                    }
                    Some(sampled_recall_at_1(row[y], &neg_logits))
                }
                (TaskKind::Retrieval, _) => {
                    let row = scores.row(r);
                    let mut p = vec![0.0; row.len()];
                    let lse = softmax_into(row, &mut p);
                    Some(row[batch[r].label as usize] - lse)
                }
                (TaskKind::Ranking, ObjectiveKind::NegXent) => {
                    let total: f64 = rows
                        .clone()
                        .map(|i| {
                            let z = scores.data()[i];
                            let y = batch[i].label as f64;
                            z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
                        })
                        .sum();
                    Some(-total / group as f64)
                }
                (TaskKind::Ranking, _) => {
                    let s: Vec<f64> = rows.clone().map(|i| scores.data()[i]).collect();
                    let l: Vec<bool> = rows.clone().map(|i| batch[i].label == 1).collect();
                    let auc = roc_auc(&s, &l);
                    if auc.is_none() {
                        log::debug!("step {}: skipping a single-class AUC group", self.step);
                    }
                    auc
                }
            };
            if let Some(o) = o {
                let c = total_cost(&self.layouts, &rec.choices, self.config.reward.include_projections);
                rec.reward = reward(o, cost_loss(c, budget));
                objectives.push(o);
                kept.push(r);
            }
        }

        if self.config.search.audit {
            if let (Some(negs), Some(&0)) = (audit_negs, kept.first()) {
                self.audit.reward_checks += 1;
                if !self.reward_recomputes(batch[0], &records[0], &negs) {
                    self.audit.reward_mismatches += 1;
                }
            }
        }

        let records: Vec<ChoiceRecord> = kept.iter().map(|&r| records[r].clone()).collect();
        let step = self.step;
        self.step += 1;
        if records.is_empty() {
            self.skipped_controller_steps += 1;
            return Ok(None);
        }
        let stats = controller_update(&mut self.policy, &mut self.baseline, &records, &self.config.controller)?;
        if let Some(before) = main_before {
            self.audit.separation_checks += 1;
            if self.model.store().checksum() != before {
                self.audit.separation_violations += 1;
            }
        }
        self.controller_steps += 1;
        let mean_obj = objectives.iter().sum::<f64>() / objectives.len() as f64;
        let mean_cost = records
            .iter()
            .map(|r| self.choice_cost(&r.choices) as f64)
            .sum::<f64>()
            / records.len() as f64;
        self.trace.push(TracePoint {
            step,
            objective: mean_obj,
            reward: stats.mean_reward,
            cost: mean_cost,
        });
        sink.record(&StepRecord {
            step,
            phase: Phase::Controller,
            loss: None,
            objective: Some(mean_obj),
            reward: Some(stats.mean_reward),
            cost: mean_cost,
            actions: self.policy.argmax_actions(),
            entropy: Some(self.policy.mean_entropy()),
            records: Some(records.len()),
        })?;
        Ok(Some(stats.mean_reward))
    }

    /// Scores one example alone under `record`'s choices and recomputes its reward.
    fn reward_recomputes(&self, example: &Example, record: &ChoiceRecord, negs: &[usize]) -> bool {
        let s = self.model.scores(&[example], Selection::Shared(&record.choices));
        let row = s.row(0);
        let negl: Vec<f64> = negs.iter().map(|&j| row[j]).collect();
        let o = sampled_recall_at_1(row[example.label as usize], &negl);
        let c: u64 = self
            .layouts
            .iter()
            .zip(&record.choices)
            .map(|(l, ch)| ch.cost(l, self.config.reward.include_projections))
            .sum();
        (reward(o, cost_loss(c, self.config.reward.budget)) - record.reward).abs() < 1e-12
    }

    /// Runs the remaining steps: warm-up if not yet done, then alternation.
    pub fn run(&mut self, sink: &mut dyn MetricsSink) -> Result<()> {
        let w = self.config.search.warmup();
        if self.step == 0 {
            self.warmup_phase(w, sink)?;
        }
        while self.step < self.config.search.steps {
            if self.config.search.is_controller_step(self.step) {
                self.train_step_controller(sink)?;
            } else {
                self.train_step_main(Phase::Main, sink)?;
            }
        }
        Ok(())
    }
}

/// One feature of an exported architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureResult {
    pub name: String,
    pub choice: FeatureChoice,
    /// Decoded `(count, dim)` ranges, including a trailing zero-width range.
    pub mes: Vec<(usize, usize)>,
    pub cost: u64,
    pub removed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub mode: SearchMode,
    pub seed: u64,
    pub features: Vec<FeatureResult>,
    pub total_cost: u64,
    pub budget: u64,
    pub main_steps: usize,
    pub controller_steps: usize,
    pub skipped_controller_steps: usize,
    pub warmup_block_coverage: f64,
    pub objective_trace: Vec<TracePoint>,
    /// The shared-weight search model evaluated under the exported architecture.
    pub shared_test: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrained_val: Option<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrained_test: Option<Metrics>,
    pub audit: AuditReport,
}

impl SearchResult {
    pub fn choices(&self) -> Vec<FeatureChoice> {
        self.features.iter().map(|f| f.choice.clone()).collect()
    }

    /// The metrics that best describe the exported architecture: retrained if available.
    pub fn test_metrics(&self) -> &Metrics {
        self.retrained_test.as_ref().unwrap_or(&self.shared_test)
    }
}

/// Describes `choices` feature by feature.
pub fn describe_architecture(config: &RunConfig, layouts: &[GridLayout], choices: &[FeatureChoice]) -> Result<Vec<FeatureResult>> {
    layouts
        .iter()
        .zip(choices)
        .zip(&config.task.features)
        .map(|((l, c), f)| {
            Ok(FeatureResult {
                name: f.name.clone(),
                choice: c.clone(),
                mes: c.decode(l)?.ranges,
                cost: c.cost(l, config.reward.include_projections),
                removed: c.is_removed(),
            })
        })
        .collect()
}

/// Full search: warm-up, alternation, export, test evaluation, optional retrain.
pub fn run_search(config: &RunConfig, data: &DatasetSplit, sink: &mut dyn MetricsSink) -> Result<SearchResult> {
    let mut state = SearchState::new(config, data)?;
    let w = config.search.warmup();
    state.warmup_phase(w, sink)?;
    let coverage = state.block_coverage();
    state.run(sink)?;

    let arch = derive_final_architecture(&state.policy);
    let features = describe_architecture(config, &state.layouts, &arch)?;
    let negatives = config.reward.negatives;
    let shared_test = evaluate(
        &state.model,
        &data.test,
        Selection::Shared(&arch),
        negatives,
        &mut eval_rng(config.seed, "test"),
    )?;
    let (retrained_val, retrained_test) = if config.search.retrain {
        let r = train_fixed(config, data, &arch, config.search.main_steps(), sink)?;
        (Some(r.val), Some(r.test))
    } else {
        (None, None)
    };
    Ok(SearchResult {
        mode: config.search.mode,
        seed: config.seed,
        total_cost: features.iter().map(|f| f.cost).sum(),
        features,
        budget: config.reward.budget,
        main_steps: state.main_steps,
        controller_steps: state.controller_steps,
        skipped_controller_steps: state.skipped_controller_steps,
        warmup_block_coverage: coverage,
        objective_trace: state.trace,
        shared_test,
        retrained_val,
        retrained_test,
        audit: state.audit,
    })
}

/// A fixed architecture trained from scratch.
#[derive(Clone, Debug)]
pub struct FixedRun {
    pub model: Model,
    pub val: Metrics,
    pub test: Metrics,
    pub final_loss: f64,
}

/// Trains a model for `choices` from scratch for `steps` steps. The seed,
/// batch stream and evaluation negatives depend only on the run seed, so
/// two calls with the same choices give identical results.
pub fn train_fixed(
    config: &RunConfig,
    data: &DatasetSplit,
    choices: &[FeatureChoice],
    steps: usize,
    sink: &mut dyn MetricsSink,
) -> Result<FixedRun> {
    let layouts = config.layouts()?;
    let mut init = stream(config.seed, 20);
    let mut batches = stream(config.seed, 21);
    let mut negs = stream(config.seed, 22);
    let mut model = Model::for_architecture(
        config.task.kind,
        &layouts,
        choices,
        config.task.num_labels(),
        &config.model,
        &mut init,
    )?;
    model.validate_examples(&data.train)?;
    let cost = total_cost(&layouts, choices, config.reward.include_projections) as f64;
    let n = data.train.len();
    let mut final_loss = f64::NAN;
    for step in 0..steps {
        let batch: Vec<&Example> = (0..config.search.batch_size)
            .map(|_| &data.train[batches.random_range(0..n)])
            .collect();
        let m = &model;
        let (loss, grads) = forward_backward(m.store(), |t| Ok(m.loss(t, &batch, Selection::None, &mut negs)))?;
        model
            .store_mut()
            .apply_gradients(&grads, config.search.lr, &config.search.optimizer)?;
        final_loss = loss;
        if step % 100 == 0 || step + 1 == steps {
            sink.record(&StepRecord {
                step,
                phase: Phase::Retrain,
                loss: Some(loss),
                objective: None,
                reward: None,
                cost,
                actions: Vec::new(),
                entropy: None,
                records: None,
            })?;
        }
    }
    let negatives = config.reward.negatives;
    let val = evaluate(&model, &data.val, Selection::None, negatives, &mut eval_rng(config.seed, "val"))?;
    let test = evaluate(&model, &data.test, Selection::None, negatives, &mut eval_rng(config.seed, "test"))?;
    Ok(FixedRun {
        model,
        val,
        test,
        final_loss,
    })
}

/// The validation objective used to rank fixed architectures.
pub fn objective_of(metrics: &Metrics, kind: ObjectiveKind) -> f64 {
    match kind {
        ObjectiveKind::SampledRecallAt1 => metrics.sampled_recall_at_1.unwrap_or(f64::NAN),
        ObjectiveKind::RocAuc => metrics.auc.unwrap_or(f64::NAN),
        ObjectiveKind::NegXent => -metrics.loss,
    }
}
