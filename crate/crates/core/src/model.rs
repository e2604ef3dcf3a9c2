//! The main model: per-feature embedding inputs, optional ReLU layers, and a
//! retrieval or ranking head.
//!
//! During search every feature reads through a [`StoredGrid`], and the blocks
//! each example may read are decided by that example's choice set. A model
//! built for a fixed architecture reads through [`StoredMe`] layers instead.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{NisError, Result};
use crate::multi_size::{MeLayer, Reduction, StoredMe};
use crate::params::{ParamId, ParamStore};
use crate::reward::{roc_auc, sampled_recall_at_1};
use crate::search_space::{BlockGrid, FeatureChoice, GridLayout};
use crate::tasks::{Example, TaskKind};
use crate::tensor::Tensor;

/// Training loss of the retrieval head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalLoss {
    #[default]
    FullSoftmax,
    SampledSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Widths of ReLU layers between the embeddings and the head.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub retrieval_loss: RetrievalLoss,
    /// Negatives per example for the sampled-softmax loss.
    #[serde(default = "default_train_negatives")]
    pub train_negatives: usize,
}

fn default_train_negatives() -> usize {
    100
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: Vec::new(),
            reduction: Reduction::Sum,
            retrieval_loss: RetrievalLoss::FullSoftmax,
            train_negatives: default_train_negatives(),
        }
    }
}

/// A block grid whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StoredGrid {
    layout: GridLayout,
    /// Row-major over `(s, t)`.
    blocks: Vec<ParamId>,
    projections: Vec<ParamId>,
}

impl StoredGrid {
    pub fn new(grid: BlockGrid, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let (layout, blocks, projections) = grid.into_parts();
        let t_count = layout.num_col_chunks();
        let blocks = blocks
            .into_iter()
            .enumerate()
            .map(|(i, b)| store.add(format!("{prefix}/block{}_{}", i / t_count, i % t_count), b))
            .collect::<Result<Vec<_>>>()?;
        let projections = projections
            .into_iter()
            .enumerate()
            .map(|(t, p)| store.add(format!("{prefix}/proj{t}"), p))
            .collect::<Result<Vec<_>>>()?;
        Ok(StoredGrid {
            layout,
            blocks,
            projections,
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn block(&self, s: usize, t: usize) -> ParamId {
        self.blocks[s * self.layout.num_col_chunks() + t]
    }

    pub fn projection(&self, t: usize) -> ParamId {
        self.projections[t]
    }

    pub fn snapshot(&self, store: &ParamStore) -> Result<BlockGrid> {
        BlockGrid::from_parts(
            self.layout.clone(),
            self.blocks.iter().map(|&b| store.get(b).clone()).collect(),
            self.projections.iter().map(|&p| store.get(p).clone()).collect(),
        )
    }

    /// One summed output row per bag. Example `i` reads column `t` only for
    /// ids whose row chunk is within `depths[i][t]`.
    pub fn forward(&self, tape: &mut Tape<'_>, bags: &[&[u32]], depths: &[&[usize]]) -> NodeId {
        assert_eq!(bags.len(), depths.len(), "one depth list per bag");
        let (s_count, t_count) = (self.layout.num_row_chunks(), self.layout.num_col_chunks());
        let located: Vec<Vec<(usize, usize)>> = bags
            .iter()
            .map(|bag| {
                bag.iter()
                    .map(|&k| self.layout.locate(k as usize).expect("ids validated against vocabulary"))
                    .collect()
            })
            .collect();
        let mut total: Option<NodeId> = None;
        for t in 0..t_count {
            let mut column: Option<NodeId> = None;
            for s in 0..s_count {
                let local: Vec<Vec<usize>> = located
                    .iter()
                    .zip(depths)
                    .map(|(ids, d)| {
                        if s < d[t] {
                            ids.iter().filter(|&&(c, _)| c == s).map(|&(_, r)| r).collect()
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                if local.iter().all(|b| b.is_empty()) {
                    continue;
                }
                let table = tape.param(self.block(s, t));
                let part = tape.gather_sum(table, local);
                column = Some(match column {
                    Some(c) => tape.add(c, part),
                    None => part,
                });
            }
            if let Some(c) = column {
                let p = tape.param(self.projections[t]);
                let projected = tape.matmul(c, p);
                total = Some(match total {
                    Some(x) => tape.add(x, projected),
                    None => projected,
                });
            }
        }
        total.unwrap_or_else(|| tape.input(Tensor::zeros(&[bags.len(), self.layout.dim()])))
    }
}

#[derive(Clone, Debug)]
pub enum FeatureInput {
    /// Search-time block grid.
    Grid(StoredGrid),
    /// Fixed architecture; `None` when the feature was removed.
    Fixed { layer: Option<StoredMe>, width: usize },
}

impl FeatureInput {
    pub fn width(&self) -> usize {
        match self {
            FeatureInput::Grid(g) => g.layout.dim(),
            FeatureInput::Fixed { width, .. } => *width,
        }
    }
}

/// Main-model parameters and structure.
#[derive(Clone, Debug)]
pub struct Model {
    task: TaskKind,
    config: ModelConfig,
    store: ParamStore,
    vocabs: Vec<usize>,
    inputs: Vec<FeatureInput>,
    hidden: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
    num_labels: usize,
}

/// Choice sets applied to a batch: one shared set, or one per example.
#[derive(Clone, Copy, Debug)]
pub enum Selection<'a> {
    Shared(&'a [FeatureChoice]),
    PerExample(&'a [&'a [FeatureChoice]]),
    /// For fixed-architecture models, which ignore choices.
    None,
}

impl Model {
    /// A search model with one block grid per feature.
    pub fn for_search<R: Rng + ?Sized>(
        task: TaskKind,
        layouts: &[GridLayout],
        num_labels: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut inputs = Vec::new();
        for (f, layout) in layouts.iter().enumerate() {
            let grid = BlockGrid::init(layout.clone(), rng);
            inputs.push(FeatureInput::Grid(StoredGrid::new(grid, &mut store, &format!("grid{f}"))?));
        }
        let vocabs = layouts.iter().map(|l| l.vocab()).collect();
        Self::finish(task, store, vocabs, inputs, num_labels, config, rng)
    }

    /// A model for a fixed architecture: each feature gets a freshly
    /// initialized multi-size layer decoded from its choice, projecting to
    /// the grid's full width.
    pub fn for_architecture<R: Rng + ?Sized>(
        task: TaskKind,
        layouts: &[GridLayout],
        choices: &[FeatureChoice],
        num_labels: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if layouts.len() != choices.len() {
            return Err(NisError::contract("one choice per feature"));
        }
        let mut store = ParamStore::new();
        let mut inputs = Vec::new();
        for (f, (layout, choice)) in layouts.iter().zip(choices).enumerate() {
            choice.validate(layout)?;
            let layer = match choice.decode(layout)?.covered() {
                Some(mes) => Some(MeLayer::build_with_output(mes, layout.dim(), rng).into_store(&mut store, &format!("me{f}"))?),
                None => None,
            };
            inputs.push(FeatureInput::Fixed {
                layer,
                width: layout.dim(),
            });
        }
        let vocabs = layouts.iter().map(|l| l.vocab()).collect();
        Self::finish(task, store, vocabs, inputs, num_labels, config, rng)
    }

    fn finish<R: Rng + ?Sized>(
        task: TaskKind,
        mut store: ParamStore,
        vocabs: Vec<usize>,
        inputs: Vec<FeatureInput>,
        num_labels: usize,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(NisError::config("model needs at least one feature"));
        }
        if task == TaskKind::Retrieval && num_labels < 2 {
            return Err(NisError::config("retrieval needs at least two labels"));
        }
        let mut width: usize = inputs.iter().map(|i| i.width()).sum();
        let mut hidden = Vec::new();
        for (l, &h) in config.hidden.iter().enumerate() {
            if h == 0 {
                return Err(NisError::config("hidden layer widths must be positive"));
            }
            let limit = (6.0 / (width + h) as f64).sqrt();
            let w = store.add(format!("hidden{l}/w"), Tensor::uniform(&[width, h], limit, rng))?;
            let b = store.add(format!("hidden{l}/b"), Tensor::zeros(&[h]))?;
            hidden.push((w, b));
            width = h;
        }
        let limit = 1.0 / (width as f64).sqrt();
        let (out_w, out_b) = match task {
            TaskKind::Retrieval => (
                store.add("head/w", Tensor::uniform(&[num_labels, width], limit, rng))?,
                store.add("head/b", Tensor::zeros(&[num_labels]))?,
            ),
            TaskKind::Ranking => (
                store.add("head/w", Tensor::uniform(&[width, 1], limit, rng))?,
                store.add("head/b", Tensor::zeros(&[1]))?,
            ),
        };
        Ok(Model {
            task,
            config: config.clone(),
            store,
            vocabs,
            inputs,
            hidden,
            out_w,
            out_b,
            num_labels,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn inputs(&self) -> &[FeatureInput] {
        &self.inputs
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The block grid of feature `f`, if this is a search model.
    pub fn grid(&self, f: usize) -> Option<&StoredGrid> {
        match &self.inputs[f] {
            FeatureInput::Grid(g) => Some(g),
            FeatureInput::Fixed { .. } => None,
        }
    }

    /// Checks every id against its feature's vocabulary.
    pub fn validate_examples(&self, examples: &[Example]) -> Result<()> {
        for ex in examples {
            if ex.features.len() != self.vocabs.len() {
                return Err(NisError::contract(format!(
                    "example has {} features, model has {}",
                    ex.features.len(),
                    self.vocabs.len()
                )));
            }
            for (bag, &v) in ex.features.iter().zip(&self.vocabs) {
                if let Some(&k) = bag.iter().find(|&&k| k as usize >= v) {
                    return Err(NisError::contract(format!("id {k} outside vocabulary of {v}")));
                }
            }
            let limit = match self.task {
                TaskKind::Retrieval => self.num_labels,
                TaskKind::Ranking => 2,
            };
            if ex.label as usize >= limit {
                return Err(NisError::contract(format!("label {} out of range", ex.label)));
            }
        }
        Ok(())
    }

    /// Last representation before the head: `[batch, width]`.
    pub fn represent(&self, tape: &mut Tape<'_>, batch: &[&Example], selection: Selection<'_>) -> NodeId {
        let n = batch.len();
        let mut parts = Vec::with_capacity(self.inputs.len());
        for (f, input) in self.inputs.iter().enumerate() {
            let bags: Vec<&[u32]> = batch.iter().map(|e| e.features[f].as_slice()).collect();
            let node = match input {
                FeatureInput::Grid(g) => {
                    let depth_of = |c: &[FeatureChoice]| c[f].depths(&g.layout);
                    let owned: Vec<Vec<usize>> = match selection {
                        Selection::Shared(c) => vec![depth_of(c)],
                        Selection::PerExample(cs) => {
                            assert_eq!(cs.len(), n, "one choice set per example");
                            cs.iter().map(|c| depth_of(c)).collect()
                        }
                        Selection::None => panic!("a search model needs choices"),
                    };
                    let depths: Vec<&[usize]> = if owned.len() == 1 {
                        vec![owned[0].as_slice(); n]
                    } else {
                        owned.iter().map(|d| d.as_slice()).collect()
                    };
                    let out = g.forward(tape, &bags, &depths);
                    self.reduce(tape, out, &bags)
                }
                FeatureInput::Fixed { layer: Some(layer), .. } => {
                    let as_usize: Vec<Vec<usize>> =
                        bags.iter().map(|b| b.iter().map(|&k| k as usize).collect()).collect();
                    layer.forward(tape, &as_usize, self.config.reduction)
                }
                FeatureInput::Fixed { layer: None, width } => tape.input(Tensor::zeros(&[n, *width])),
            };
            parts.push(node);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_cols(parts) };
        for &(w, b) in &self.hidden {
            let wn = tape.param(w);
            let bn = tape.param(b);
            let z = tape.matmul(h, wn);
            let z = tape.add_row(z, bn);
            h = tape.relu(z);
        }
        h
    }

    fn reduce(&self, tape: &mut Tape<'_>, node: NodeId, bags: &[&[u32]]) -> NodeId {
        match self.config.reduction {
            Reduction::Sum => node,
            Reduction::Mean => {
                let f = bags
                    .iter()
                    .map(|b| if b.is_empty() { 1.0 } else { 1.0 / b.len() as f64 })
                    .collect();
                tape.scale_rows(node, f)
            }
        }
    }

    /// Head scores: `[batch, labels]` logits for retrieval, `[batch, 1]` for ranking.
    pub fn head(&self, tape: &mut Tape<'_>, h: NodeId) -> NodeId {
        let w = tape.param(self.out_w);
        let b = tape.param(self.out_b);
        let z = match self.task {
            TaskKind::Retrieval => tape.matmul_bt(h, w),
            TaskKind::Ranking => tape.matmul(h, w),
        };
        tape.add_row(z, b)
    }

    /// Mean training loss of `batch`: softmax (full or sampled) for
    /// retrieval, sigmoid cross entropy for ranking.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&Example],
        selection: Selection<'_>,
        rng: &mut R,
    ) -> NodeId {
        let h = self.represent(tape, batch, selection);
        match (self.task, self.config.retrieval_loss) {
            (TaskKind::Retrieval, RetrievalLoss::SampledSoftmax) => {
                let candidates = batch
                    .iter()
                    .map(|e| {
                        let y = e.label as usize;
                        let mut c = vec![y];
                        c.extend(sample_negatives(y, self.num_labels, self.config.train_negatives, rng));
                        c
                    })
                    .collect();
                let w = tape.param(self.out_w);
                let b = tape.param(self.out_b);
                tape.sampled_softmax_xent(h, w, b, candidates)
            }
            (TaskKind::Retrieval, RetrievalLoss::FullSoftmax) => {
                let logits = self.head(tape, h);
                tape.softmax_xent(logits, batch.iter().map(|e| e.label as usize).collect())
            }
            (TaskKind::Ranking, _) => {
                let logits = self.head(tape, h);
                tape.sigmoid_xent(logits, batch.iter().map(|e| e.label as f64).collect())
            }
        }
    }

    /// Forward-only head scores for a batch.
    pub fn scores(&self, batch: &[&Example], selection: Selection<'_>) -> Tensor {
        let mut tape = Tape::new(&self.store);
        let h = self.represent(&mut tape, batch, selection);
        let s = self.head(&mut tape, h);
        tape.value(s).clone()
    }
}

/// `count` labels drawn uniformly with replacement from `0..num_labels`
/// excluding `label`.
pub fn sample_negatives<R: Rng + ?Sized>(label: usize, num_labels: usize, count: usize, rng: &mut R) -> Vec<usize> {
    assert!(num_labels >= 2, "need a label other than the true one");
    (0..count)
        .map(|_| {
            let r = rng.random_range(0..num_labels - 1);
            if r >= label {
                r + 1
            } else {
                r
            }
        })
        .collect()
}

/// Per-example Sampled Recall@1 for rows of retrieval `scores`.
pub fn sampled_recall_rows<R: Rng + ?Sized>(scores: &Tensor, labels: &[u32], negatives: usize, rng: &mut R) -> Vec<f64> {
    let num_labels = scores.cols();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = scores.row(i);
            let negs: Vec<f64> = sample_negatives(y as usize, num_labels, negatives, rng)
                .into_iter()
                .map(|j| row[j])
                .collect();
            sampled_recall_at_1(row[y as usize], &negs)
        })
        .collect()
}

/// 1 when fewer than `k` other labels score at least as high as the true one.
pub fn hit_at_k(row: &[f64], label: usize, k: usize) -> bool {
    let target = row[label];
    let better = row
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != label && s >= target)
        .count();
    better < k
}

/// Test metrics; fields not applicable to the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub sampled_recall_at_1: Option<f64>,
    pub recall_at_1: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub auc: Option<f64>,
    pub loss: f64,
}

const EVAL_CHUNK: usize = 256;

/// Evaluates `model` on `examples` under one shared selection. Retrieval
/// reports exact full-vocabulary Recall@1/@5 and Sampled Recall@1 against
/// `negatives` negatives drawn from `rng`; ranking reports pooled ROC-AUC.
pub fn evaluate<R: Rng + ?Sized>(
    model: &Model,
    examples: &[Example],
    selection: Selection<'_>,
    negatives: usize,
    rng: &mut R,
) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(NisError::contract("cannot evaluate on an empty split"));
    }
    model.validate_examples(examples)?;
    let mut m = Metrics {
        examples: examples.len(),
        ..Metrics::default()
    };
    let mut sampled = 0.0;
    let (mut r1, mut r5, mut loss) = (0.0, 0.0, 0.0);
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for chunk in examples.chunks(EVAL_CHUNK) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let scores = model.scores(&batch, selection);
        let labels: Vec<u32> = chunk.iter().map(|e| e.label).collect();
        match model.task {
            TaskKind::Retrieval => {
                sampled += sampled_recall_rows(&scores, &labels, negatives, rng).iter().sum::<f64>();
                for (i, &y) in labels.iter().enumerate() {
                    let row = scores.row(i);
                    r1 += hit_at_k(row, y as usize, 1) as u8 as f64;
                    r5 += hit_at_k(row, y as usize, 5) as u8 as f64;
                    let mut p = vec![0.0; row.len()];
                    let lse = crate::autodiff::softmax_into(row, &mut p);
                    loss += lse - row[y as usize];
                }
            }
            TaskKind::Ranking => {
                for (i, &y) in labels.iter().enumerate() {
                    let z = scores.data()[i];
                    loss += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
                    all_scores.push(z);
                    all_labels.push(y == 1);
                }
            }
        }
    }
    let n = examples.len() as f64;
    m.loss = loss / n;
    match model.task {
        TaskKind::Retrieval => {
            m.sampled_recall_at_1 = Some(sampled / n);
            m.recall_at_1 = Some(r1 / n);
            m.recall_at_5 = Some(r5 / n);
        }
        TaskKind::Ranking => m.auc = roc_auc(&all_scores, &all_labels),
    }
    Ok(m)
}
