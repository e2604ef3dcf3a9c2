//! Embedding blocks for one feature and what a controller choice selects.
//!
//! A feature with vocabulary `v` and maximum width `d` is cut into an
//! `S x T` grid: row chunks partition the frequency-sorted ids, column chunks
//! partition the embedding dimensions. Block `(s, t)` holds the slice of
//! chunk `s` rows and chunk `t` columns; each column chunk has its own
//! projection back to the full width `d`.
//!
//! Choices use 1-based counts: a single-size choice `Corner { rows, cols }`
//! keeps the first `rows` row chunks and first `cols` column chunks. A
//! multi-size choice gives each column chunk a row depth in `0..=S`, where 0
//! drops the column for every item. Ids past the selected rows read as zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NisError, Result};
use crate::tensor::{axpy, Tensor};

/// Split sizes of a block grid, without weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct GridLayout {
    row_splits: Vec<usize>,
    col_splits: Vec<usize>,
    row_bounds: Vec<usize>,
    col_bounds: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    row_splits: Vec<usize>,
    col_splits: Vec<usize>,
}

impl TryFrom<RawLayout> for GridLayout {
    type Error = NisError;

    fn try_from(raw: RawLayout) -> Result<Self> {
        GridLayout::new(raw.row_splits, raw.col_splits)
    }
}

impl From<GridLayout> for RawLayout {
    fn from(g: GridLayout) -> Self {
        RawLayout {
            row_splits: g.row_splits,
            col_splits: g.col_splits,
        }
    }
}

/// Default row fractions, in tenths of the vocabulary.
const DEFAULT_ROW_TENTHS: [usize; 5] = [1, 2, 2, 2, 3];
const DEFAULT_COL_CHUNKS: usize = 4;

impl GridLayout {
    pub fn new(row_splits: Vec<usize>, col_splits: Vec<usize>) -> Result<Self> {
        if row_splits.len() < 2 || col_splits.len() < 2 {
            return Err(NisError::config(format!(
                "a grid needs at least 2 row and 2 column chunks, got {}x{}",
                row_splits.len(),
                col_splits.len()
            )));
        }
        if row_splits.iter().chain(&col_splits).any(|&x| x == 0) {
            return Err(NisError::config("grid chunks must be nonempty"));
        }
        let row_bounds = cumulative(&row_splits);
        let col_bounds = cumulative(&col_splits);
        Ok(GridLayout {
            row_splits,
            col_splits,
            row_bounds,
            col_bounds,
        })
    }

    /// The default grid for a vocabulary of `v` items: rows at
    /// `[0.1, 0.2, 0.2, 0.2, 0.3]` of `v` (the last chunk absorbs rounding)
    /// and four equal column chunks of `d = 32 * ceil(v^0.35 / 32)`.
    ///
    /// `rows` or `cols` replace the corresponding default split.
    pub fn default_for_vocab(v: usize, rows: Option<Vec<usize>>, cols: Option<Vec<usize>>) -> Result<Self> {
        let rows = match rows {
            Some(r) => {
                if r.iter().sum::<usize>() != v {
                    return Err(NisError::config(format!(
                        "row splits sum to {}, vocabulary is {v}",
                        r.iter().sum::<usize>()
                    )));
                }
                r
            }
            None => {
                if v < 10 {
                    return Err(NisError::config(format!(
                        "vocabulary of {v} cannot fill 5 nonempty row chunks"
                    )));
                }
                let mut r: Vec<usize> = DEFAULT_ROW_TENTHS[..4].iter().map(|&t| v * t / 10).collect();
                r.push(v - r.iter().sum::<usize>());
                r
            }
        };
        let cols = match cols {
            Some(c) => c,
            None => {
                let d = default_dim(v);
                vec![d / DEFAULT_COL_CHUNKS; DEFAULT_COL_CHUNKS]
            }
        };
        GridLayout::new(rows, cols)
    }

    /// Number of row chunks, `S`.
    pub fn num_row_chunks(&self) -> usize {
        self.row_splits.len()
    }

    /// Number of column chunks, `T`.
    pub fn num_col_chunks(&self) -> usize {
        self.col_splits.len()
    }

    pub fn vocab(&self) -> usize {
        *self.row_bounds.last().unwrap()
    }

    pub fn dim(&self) -> usize {
        *self.col_bounds.last().unwrap()
    }

    pub fn row_splits(&self) -> &[usize] {
        &self.row_splits
    }

    pub fn col_splits(&self) -> &[usize] {
        &self.col_splits
    }

    /// Cumulative item counts `[0, V_1, .., V_S]`.
    pub fn row_bounds(&self) -> &[usize] {
        &self.row_bounds
    }

    /// Cumulative widths `[0, D_1, .., D_T]`.
    pub fn col_bounds(&self) -> &[usize] {
        &self.col_bounds
    }

    /// Whether every row chunk is taller than the full embedding width, the
    /// regime in which projection parameters are negligible.
    pub fn has_tall_blocks(&self) -> bool {
        self.row_splits.iter().all(|&r| r > self.dim())
    }

    /// 0-based row chunk holding item `k` and the row inside that chunk.
    pub fn locate(&self, k: usize) -> Result<(usize, usize)> {
        if k >= self.vocab() {
            return Err(NisError::contract(format!(
                "id {k} outside vocabulary of {}",
                self.vocab()
            )));
        }
        let s = self.row_bounds.partition_point(|&b| b <= k) - 1;
        Ok((s, k - self.row_bounds[s]))
    }

    /// Number of single-size actions, sentinel included.
    pub fn se_action_count(&self) -> usize {
        self.num_row_chunks() * self.num_col_chunks() + 1
    }
}

/// `32 * ceil(v^0.35 / 32)`.
pub fn default_dim(v: usize) -> usize {
    32 * ((v as f64).powf(0.35) / 32.0).ceil() as usize
}

fn cumulative(splits: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(splits.len() + 1);
    out.push(0);
    let mut acc = 0;
    for &s in splits {
        acc += s;
        out.push(acc);
    }
    out
}

/// How a run config describes a feature's grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Preset(GridPreset),
    Explicit(ExplicitGrid),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPreset {
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitGrid {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<Vec<usize>>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Preset(GridPreset::Auto)
    }
}

impl GridSpec {
    pub fn layout(&self, vocab: usize) -> Result<GridLayout> {
        match self {
            GridSpec::Preset(GridPreset::Auto) => GridLayout::default_for_vocab(vocab, None, None),
            GridSpec::Explicit(e) => GridLayout::default_for_vocab(vocab, e.rows.clone(), e.cols.clone()),
        }
    }
}

/// A single-size choice: a grid corner, or removal of the feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeChoice {
    Removed,
    Corner { rows: usize, cols: usize },
}

impl SeChoice {
    pub fn validate(&self, layout: &GridLayout) -> Result<()> {
        if let SeChoice::Corner { rows, cols } = *self {
            if rows == 0 || rows > layout.num_row_chunks() || cols == 0 || cols > layout.num_col_chunks() {
                return Err(NisError::contract(format!(
                    "corner ({rows}, {cols}) outside a {}x{} grid",
                    layout.num_row_chunks(),
                    layout.num_col_chunks()
                )));
            }
        }
        Ok(())
    }

    /// The equivalent multi-size choice: depth `rows` on the first `cols`
    /// columns, 0 elsewhere.
    pub fn to_me_choice(&self, layout: &GridLayout) -> MeChoice {
        let t = layout.num_col_chunks();
        match *self {
            SeChoice::Removed => MeChoice(vec![0; t]),
            SeChoice::Corner { rows, cols } => {
                MeChoice((0..t).map(|i| if i < cols { rows } else { 0 }).collect())
            }
        }
    }

    /// Action index in the controller's categorical: 0 is the sentinel,
    /// corners follow in row-major order.
    pub fn action_index(&self, layout: &GridLayout) -> usize {
        match *self {
            SeChoice::Removed => 0,
            SeChoice::Corner { rows, cols } => 1 + (rows - 1) * layout.num_col_chunks() + (cols - 1),
        }
    }

    pub fn from_action_index(index: usize, layout: &GridLayout) -> Result<Self> {
        if index >= layout.se_action_count() {
            return Err(NisError::contract(format!("action {index} outside single-size action space")));
        }
        if index == 0 {
            return Ok(SeChoice::Removed);
        }
        let t = layout.num_col_chunks();
        Ok(SeChoice::Corner {
            rows: (index - 1) / t + 1,
            cols: (index - 1) % t + 1,
        })
    }
}

/// A multi-size choice: one row depth per column chunk.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeChoice(pub Vec<usize>);

impl MeChoice {
    pub fn depths(&self) -> &[usize] {
        &self.0
    }

    pub fn validate(&self, layout: &GridLayout) -> Result<()> {
        if self.0.len() != layout.num_col_chunks() {
            return Err(NisError::contract(format!(
                "multi-size choice has {} entries, grid has {} columns",
                self.0.len(),
                layout.num_col_chunks()
            )));
        }
        if let Some(&bad) = self.0.iter().find(|&&s| s > layout.num_row_chunks()) {
            return Err(NisError::contract(format!(
                "row depth {bad} exceeds {} row chunks",
                layout.num_row_chunks()
            )));
        }
        Ok(())
    }
}

/// Which block row a lookup read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockRead {
    pub row_chunk: usize,
    pub col_chunk: usize,
    pub row: usize,
}

/// Block weights and column projections for one feature.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrid {
    layout: GridLayout,
    /// Row-major over `(s, t)`.
    blocks: Vec<Tensor>,
    projections: Vec<Tensor>,
}

impl BlockGrid {
    /// Blocks and projections drawn uniformly from `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init<R: Rng + ?Sized>(layout: GridLayout, rng: &mut R) -> Self {
        let d = layout.dim();
        let limit = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::new();
        for &rows in layout.row_splits() {
            for &cols in layout.col_splits() {
                blocks.push(Tensor::uniform(&[rows, cols], limit, rng));
            }
        }
        let projections = layout
            .col_splits()
            .iter()
            .map(|&c| Tensor::uniform(&[c, d], limit, rng))
            .collect();
        BlockGrid {
            layout,
            blocks,
            projections,
        }
    }

    pub fn from_parts(layout: GridLayout, blocks: Vec<Tensor>, projections: Vec<Tensor>) -> Result<Self> {
        let (s_count, t_count) = (layout.num_row_chunks(), layout.num_col_chunks());
        if blocks.len() != s_count * t_count || projections.len() != t_count {
            return Err(NisError::contract("block or projection count does not match the grid"));
        }
        for s in 0..s_count {
            for t in 0..t_count {
                let want = [layout.row_splits()[s], layout.col_splits()[t]];
                if blocks[s * t_count + t].shape() != want {
                    return Err(NisError::contract(format!("block ({s}, {t}) should be {want:?}")));
                }
            }
        }
        for t in 0..t_count {
            if projections[t].shape() != [layout.col_splits()[t], layout.dim()] {
                return Err(NisError::contract(format!("projection {t} has wrong shape")));
            }
        }
        Ok(BlockGrid {
            layout,
            blocks,
            projections,
        })
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    /// Layout, row-major blocks, and projections.
    pub fn into_parts(self) -> (GridLayout, Vec<Tensor>, Vec<Tensor>) {
        (self.layout, self.blocks, self.projections)
    }

    /// Block `(s, t)`, 0-based.
    pub fn block(&self, s: usize, t: usize) -> &Tensor {
        &self.blocks[s * self.layout.num_col_chunks() + t]
    }

    pub fn block_mut(&mut self, s: usize, t: usize) -> &mut Tensor {
        let t_count = self.layout.num_col_chunks();
        &mut self.blocks[s * t_count + t]
    }

    pub fn projection(&self, t: usize) -> &Tensor {
        &self.projections[t]
    }

    pub fn projection_mut(&mut self, t: usize) -> &mut Tensor {
        &mut self.projections[t]
    }

    fn accumulate_column(&self, s: usize, t: usize, row: usize, out: &mut [f64]) {
        let e = self.block(s, t).row(row);
        let p = &self.projections[t];
        for (i, &x) in e.iter().enumerate() {
            axpy(x, p.row(i), out);
        }
    }

    /// Embedding of item `k` under a single-size choice.
    pub fn se_lookup(&self, choice: &SeChoice, k: usize) -> Result<Tensor> {
        self.se_lookup_traced(choice, k, &mut |_| {})
    }

    /// [`se_lookup`](Self::se_lookup) reporting every block row it reads.
    pub fn se_lookup_traced(
        &self,
        choice: &SeChoice,
        k: usize,
        trace: &mut dyn FnMut(BlockRead),
    ) -> Result<Tensor> {
        choice.validate(&self.layout)?;
        let (s, row) = self.layout.locate(k)?;
        let mut out = vec![0.0; self.layout.dim()];
        if let SeChoice::Corner { rows, cols } = *choice {
            if s < rows {
                for t in 0..cols {
                    trace(BlockRead {
                        row_chunk: s,
                        col_chunk: t,
                        row,
                    });
                    self.accumulate_column(s, t, row, &mut out);
                }
            }
        }
        Tensor::vector(out)
    }

    /// Embedding of item `k` under a multi-size choice.
    pub fn me_lookup(&self, choice: &MeChoice, k: usize) -> Result<Tensor> {
        self.me_lookup_traced(choice, k, &mut |_| {})
    }

    pub fn me_lookup_traced(
        &self,
        choice: &MeChoice,
        k: usize,
        trace: &mut dyn FnMut(BlockRead),
    ) -> Result<Tensor> {
        choice.validate(&self.layout)?;
        let (s, row) = self.layout.locate(k)?;
        let mut out = vec![0.0; self.layout.dim()];
        for (t, &depth) in choice.depths().iter().enumerate() {
            if s < depth {
                trace(BlockRead {
                    row_chunk: s,
                    col_chunk: t,
                    row,
                });
                self.accumulate_column(s, t, row, &mut out);
            }
        }
        Tensor::vector(out)
    }
}

/// Block parameters used by a single-size choice, `V_s * D_t`.
pub fn se_cost(layout: &GridLayout, choice: &SeChoice) -> u64 {
    match *choice {
        SeChoice::Removed => 0,
        SeChoice::Corner { rows, cols } => (layout.row_bounds()[rows] * layout.col_bounds()[cols]) as u64,
    }
}

/// Block parameters used by a multi-size choice, `sum_t d_t * V_{depth_t}`.
pub fn me_cost(layout: &GridLayout, choice: &MeChoice) -> u64 {
    choice
        .depths()
        .iter()
        .zip(layout.col_splits())
        .map(|(&depth, &width)| (width * layout.row_bounds()[depth]) as u64)
        .sum()
}

/// Projection parameters of the columns a choice uses, `sum d_t * d`.
pub fn projection_cost(layout: &GridLayout, choice: &MeChoice) -> u64 {
    choice
        .depths()
        .iter()
        .zip(layout.col_splits())
        .filter(|(&depth, _)| depth > 0)
        .map(|(_, &width)| (width * layout.dim()) as u64)
        .sum()
}

/// A multi-size embedding spec: `(count, dim)` pairs with non-increasing dims.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct Mes {
    pairs: Vec<(usize, usize)>,
}

impl TryFrom<Vec<(usize, usize)>> for Mes {
    type Error = NisError;

    fn try_from(pairs: Vec<(usize, usize)>) -> Result<Self> {
        Mes::new(pairs)
    }
}

impl From<Mes> for Vec<(usize, usize)> {
    fn from(m: Mes) -> Self {
        m.pairs
    }
}

impl Mes {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(NisError::config("a multi-size spec needs at least one bucket"));
        }
        if pairs.iter().any(|&(v, d)| v == 0 || d == 0) {
            return Err(NisError::config("bucket sizes and dimensions must be positive"));
        }
        if pairs.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(NisError::config("bucket dimensions must be non-increasing"));
        }
        Ok(Mes { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn num_buckets(&self) -> usize {
        self.pairs.len()
    }

    pub fn vocab(&self) -> usize {
        self.pairs.iter().map(|p| p.0).sum()
    }

    /// Widest bucket, which is also the output width of the layer.
    pub fn max_dim(&self) -> usize {
        self.pairs[0].1
    }

    /// `[0, V_1, .., V_M]`.
    pub fn bounds(&self) -> Vec<usize> {
        cumulative(&self.pairs.iter().map(|p| p.0).collect::<Vec<_>>())
    }
}

/// The item ranges a multi-size choice realizes, including any trailing
/// range of items that receive no embedding at all (dimension 0).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedMes {
    pub ranges: Vec<(usize, usize)>,
}

impl DecodedMes {
    /// Items left with a zero-width embedding.
    pub fn uncovered(&self) -> usize {
        self.ranges.iter().filter(|r| r.1 == 0).map(|r| r.0).sum()
    }

    /// The buckets without the zero-width range, or `None` if nothing is covered.
    pub fn covered(&self) -> Option<Mes> {
        let pairs: Vec<_> = self.ranges.iter().copied().filter(|r| r.1 > 0).collect();
        if pairs.is_empty() {
            None
        } else {
            Mes::new(pairs).ok()
        }
    }
}

/// Groups consecutive row chunks by the total width their items receive.
///
/// Column `t` covers exactly the ids below `V_{depth_t}`, so the per-item
/// width can only shrink as ids grow.
pub fn choice_to_mes(layout: &GridLayout, choice: &MeChoice) -> Result<DecodedMes> {
    choice.validate(layout)?;
    let mut ranges: Vec<(usize, usize)> = Vec::new();
    for s in 0..layout.num_row_chunks() {
        let width: usize = choice
            .depths()
            .iter()
            .zip(layout.col_splits())
            .filter(|(&depth, _)| depth > s)
            .map(|(_, &w)| w)
            .sum();
        let count = layout.row_splits()[s];
        match ranges.last_mut() {
            Some(last) if last.1 == width => last.0 += count,
            _ => ranges.push((count, width)),
        }
    }
    Ok(DecodedMes { ranges })
}

/// Per-feature choice in an exported architecture.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChoice {
    Se(SeChoice),
    Me(MeChoice),
}

impl FeatureChoice {
    pub fn validate(&self, layout: &GridLayout) -> Result<()> {
        match self {
            FeatureChoice::Se(c) => c.validate(layout),
            FeatureChoice::Me(c) => c.validate(layout),
        }
    }

    /// Row depth of every column chunk.
    pub fn depths(&self, layout: &GridLayout) -> Vec<usize> {
        match self {
            FeatureChoice::Se(c) => c.to_me_choice(layout).0,
            FeatureChoice::Me(c) => c.0.clone(),
        }
    }

    pub fn block_cost(&self, layout: &GridLayout) -> u64 {
        match self {
            FeatureChoice::Se(c) => se_cost(layout, c),
            FeatureChoice::Me(c) => me_cost(layout, c),
        }
    }

    /// Block cost, plus projections of the used columns when asked.
    pub fn cost(&self, layout: &GridLayout, include_projections: bool) -> u64 {
        let mut c = self.block_cost(layout);
        if include_projections {
            c += projection_cost(layout, &MeChoice(self.depths(layout)));
        }
        c
    }

    pub fn is_removed(&self) -> bool {
        match self {
            FeatureChoice::Se(c) => *c == SeChoice::Removed,
            FeatureChoice::Me(c) => c.0.iter().all(|&d| d == 0),
        }
    }

    pub fn decode(&self, layout: &GridLayout) -> Result<DecodedMes> {
        choice_to_mes(layout, &MeChoice(self.depths(layout)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    const M: usize = 1_000_000;

    fn grid_1000() -> GridLayout {
        GridLayout::default_for_vocab(1000, None, None).unwrap()
    }

    fn grid_10m() -> GridLayout {
        GridLayout::default_for_vocab(10 * M, None, Some(vec![64; 4])).unwrap()
    }

    #[test]
    fn default_grid_heuristic() {
        let g = grid_1000();
        assert_eq!(g.row_splits(), &[100, 200, 200, 200, 300]);
        assert_eq!(g.col_splits(), &[8, 8, 8, 8]);
        assert_eq!(g.dim(), 32);

        let g = GridLayout::default_for_vocab(100_000, None, None).unwrap();
        assert_eq!(g.dim(), 64);
        assert_eq!(g.col_splits(), &[16; 4]);

        let g = GridLayout::default_for_vocab(10 * M, None, None).unwrap();
        assert_eq!(g.row_splits(), &[M, 2 * M, 2 * M, 2 * M, 3 * M]);
        // 1e7^0.35 = 281.8, so the heuristic width is 9 * 32.
        assert_eq!(g.dim(), 288);

        let g = grid_10m();
        assert_eq!(g.row_splits(), &[M, 2 * M, 2 * M, 2 * M, 3 * M]);
        assert_eq!(g.col_splits(), &[64; 4]);
        assert_eq!(g.num_row_chunks() * g.num_col_chunks(), 20);
    }

    #[test]
    fn rounding_goes_to_the_last_chunk() {
        let g = GridLayout::default_for_vocab(17, None, None).unwrap();
        assert_eq!(g.row_splits(), &[1, 3, 3, 3, 7]);
        assert_eq!(g.vocab(), 17);
    }

    #[test]
    fn tiny_vocab_is_configuration_error() {
        assert!(matches!(
            GridLayout::default_for_vocab(9, None, None),
            Err(NisError::Config(_))
        ));
        assert!(GridLayout::new(vec![5], vec![2, 2]).is_err());
        assert!(GridLayout::new(vec![5, 0], vec![2, 2]).is_err());
    }

    #[test]
    fn se_costs() {
        let g = grid_1000();
        assert_eq!(se_cost(&g, &SeChoice::Removed), 0);
        assert_eq!(se_cost(&g, &SeChoice::Corner { rows: 3, cols: 2 }), 8000);
        let g = grid_10m();
        assert_eq!(se_cost(&g, &SeChoice::Corner { rows: 5, cols: 4 }), 2560 * M as u64);
    }

    #[test]
    fn me_costs() {
        let g = grid_1000();
        assert_eq!(me_cost(&g, &MeChoice(vec![0; 4])), 0);
        // 8*1000 + 8*300 + 0 + 8*100
        assert_eq!(me_cost(&g, &MeChoice(vec![5, 2, 0, 1])), 11200);
        let g = grid_10m();
        assert_eq!(me_cost(&g, &MeChoice(vec![2, 5, 0, 2])), 1024 * M as u64);
    }

    #[test]
    fn choice_to_mes_examples() {
        let g = grid_10m();
        let d = choice_to_mes(&g, &MeChoice(vec![2, 5, 0, 2])).unwrap();
        assert_eq!(d.ranges, vec![(3 * M, 192), (7 * M, 64)]);

        let g = grid_1000();
        let d = choice_to_mes(&g, &MeChoice(vec![2, 5, 0, 2])).unwrap();
        assert_eq!(d.ranges, vec![(300, 24), (700, 8)]);

        let d = choice_to_mes(&g, &MeChoice(vec![5; 4])).unwrap();
        assert_eq!(d.ranges, vec![(1000, 32)]);

        let d = choice_to_mes(&g, &MeChoice(vec![1, 0, 0, 0])).unwrap();
        assert_eq!(d.ranges, vec![(100, 8), (900, 0)]);
        assert_eq!(d.uncovered(), 900);
        assert_eq!(d.covered().unwrap().pairs(), &[(100, 8)]);

        let d = choice_to_mes(&g, &MeChoice(vec![0; 4])).unwrap();
        assert_eq!(d.covered(), None);
    }

    #[test]
    fn removed_and_oov_lookups_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = BlockGrid::init(grid_1000(), &mut rng);
        for k in [0, 99, 100, 999] {
            let e = grid.se_lookup(&SeChoice::Removed, k).unwrap();
            assert!(e.data().iter().all(|&x| x == 0.0));
        }
        let e = grid.se_lookup(&SeChoice::Corner { rows: 1, cols: 1 }, 100).unwrap();
        assert!(e.data().iter().all(|&x| x == 0.0));
        let e = grid.se_lookup(&SeChoice::Corner { rows: 1, cols: 1 }, 99).unwrap();
        assert!(e.data().iter().any(|&x| x != 0.0));
        for k in [0, 500, 999] {
            let e = grid.me_lookup(&MeChoice(vec![0; 4]), k).unwrap();
            assert!(e.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn out_of_range_id_is_contract_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = BlockGrid::init(grid_1000(), &mut rng);
        assert!(matches!(
            grid.se_lookup(&SeChoice::Removed, 1000),
            Err(NisError::Contract(_))
        ));
        assert!(grid.me_lookup(&MeChoice(vec![6, 0, 0, 0]), 0).is_err());
    }

    #[test]
    fn full_corner_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layout = GridLayout::new(vec![3, 4, 5], vec![2, 3]).unwrap();
        let grid = BlockGrid::init(layout.clone(), &mut rng);
        // Materialize the full v x d matrix and the stacked projection.
        let (v, d) = (layout.vocab(), layout.dim());
        let mut dense = vec![vec![0.0; d]; v];
        for k in 0..v {
            let (s, r) = layout.locate(k).unwrap();
            let mut c = 0;
            for t in 0..2 {
                for x in grid.block(s, t).row(r) {
                    dense[k][c] = *x;
                    c += 1;
                }
            }
        }
        let mut stacked = Vec::new();
        for t in 0..2 {
            stacked.extend_from_slice(grid.projection(t).data());
        }
        let p = Tensor::matrix(d, d, stacked).unwrap();
        for k in 0..v {
            let row = Tensor::matrix(1, d, dense[k].clone()).unwrap();
            let want = row.matmul(&p);
            let got = grid.se_lookup(&SeChoice::Corner { rows: 3, cols: 2 }, k).unwrap();
            for (a, b) in want.data().iter().zip(got.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fig_2c_item_coverage() {
        // Shrunk 10M grid: one item per "million".
        let layout = GridLayout::new(vec![1, 2, 2, 2, 3], vec![64; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = BlockGrid::init(layout, &mut rng);
        let choice = MeChoice(vec![2, 5, 0, 2]);
        let mut reads = Vec::new();
        grid.me_lookup_traced(&choice, 0, &mut |r| reads.push(r)).unwrap();
        assert_eq!(reads.len(), 3);
        reads.clear();
        grid.me_lookup_traced(&choice, 9, &mut |r| reads.push(r)).unwrap();
        assert_eq!(reads.len(), 1);
    }

    #[test]
    fn full_depth_me_equals_full_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = BlockGrid::init(grid_1000(), &mut rng);
        for k in (0..1000).step_by(37) {
            let a = grid.se_lookup(&SeChoice::Corner { rows: 5, cols: 4 }, k).unwrap();
            let b = grid.me_lookup(&MeChoice(vec![5; 4]), k).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn action_index_round_trip() {
        let g = grid_1000();
        assert_eq!(g.se_action_count(), 21);
        let mut seen = HashSet::new();
        for a in 0..21 {
            let c = SeChoice::from_action_index(a, &g).unwrap();
            assert_eq!(c.action_index(&g), a);
            seen.insert(c);
        }
        assert_eq!(seen.len(), 21);
        assert!(SeChoice::from_action_index(21, &g).is_err());
    }

    #[test]
    fn projection_cost_counts_used_columns() {
        let g = grid_1000();
        assert_eq!(projection_cost(&g, &MeChoice(vec![5, 0, 1, 0])), 2 * 8 * 32);
        let c = FeatureChoice::Se(SeChoice::Corner { rows: 1, cols: 2 });
        assert_eq!(c.cost(&g, false), 1600);
        assert_eq!(c.cost(&g, true), 1600 + 2 * 8 * 32);
    }

    #[test]
    fn mes_invariants() {
        assert!(Mes::new(vec![]).is_err());
        assert!(Mes::new(vec![(10, 2), (10, 4)]).is_err());
        assert!(Mes::new(vec![(0, 2)]).is_err());
        let m = Mes::new(vec![(10, 4), (10, 2)]).unwrap();
        assert_eq!(m.bounds(), vec![0, 10, 20]);
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(json, "[[10,4],[10,2]]");
        assert!(serde_json::from_str::<Mes>("[[1,1],[1,2]]").is_err());
    }
}
