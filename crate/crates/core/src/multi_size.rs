//! A multi-size embedding layer built from a [`Mes`].
//!
//! Bucket `m` owns the next `v_m` ids with a `v_m x d_m` matrix and a
//! projection `d_m x out`, so every id comes out `out`-dimensional. A layer
//! built with [`MeLayer::build`] projects to `d_1`, the widest bucket.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{NisError, Result};
use crate::params::{ParamId, ParamStore};
use crate::search_space::{choice_to_mes, BlockGrid, MeChoice, Mes};
use crate::tensor::{axpy, Tensor};

/// How a bag of ids is reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeLayer {
    mes: Mes,
    bounds: Vec<usize>,
    buckets: Vec<Tensor>,
    projections: Vec<Tensor>,
    output_dim: usize,
}

/// Bucket scalars, `sum_m v_m * d_m`; projections are not counted.
pub fn me_param_count(mes: &Mes) -> u64 {
    mes.pairs().iter().map(|&(v, d)| (v * d) as u64).sum()
}

impl MeLayer {
    /// Allocates buckets and projections to width `d_1`, initialized
    /// uniformly in `[-1/sqrt(d_1), 1/sqrt(d_1)]`.
    pub fn build<R: Rng + ?Sized>(mes: Mes, rng: &mut R) -> Self {
        let out = mes.max_dim();
        Self::build_with_output(mes, out, rng)
    }

    /// Like [`build`](Self::build) but projecting to `output_dim`.
    pub fn build_with_output<R: Rng + ?Sized>(mes: Mes, output_dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (output_dim as f64).sqrt();
        let buckets = mes
            .pairs()
            .iter()
            .map(|&(v, d)| Tensor::uniform(&[v, d], limit, rng))
            .collect();
        let projections = mes
            .pairs()
            .iter()
            .map(|&(_, d)| Tensor::uniform(&[d, output_dim], limit, rng))
            .collect();
        MeLayer {
            bounds: mes.bounds(),
            mes,
            buckets,
            projections,
            output_dim,
        }
    }

    pub fn from_parts(mes: Mes, buckets: Vec<Tensor>, projections: Vec<Tensor>) -> Result<Self> {
        if buckets.len() != mes.num_buckets() || projections.len() != mes.num_buckets() {
            return Err(NisError::contract("one bucket and one projection per spec entry"));
        }
        let output_dim = projections[0].cols();
        for (m, &(v, d)) in mes.pairs().iter().enumerate() {
            if buckets[m].shape() != [v, d] || projections[m].shape() != [d, output_dim] {
                return Err(NisError::contract(format!("bucket {m} shapes do not match ({v}, {d})")));
            }
        }
        Ok(MeLayer {
            bounds: mes.bounds(),
            mes,
            buckets,
            projections,
            output_dim,
        })
    }

    /// Materializes the layer a multi-size choice realizes on `grid`.
    ///
    /// Bucket rows are the selected block rows laid side by side and each
    /// bucket's projection stacks the matching column projections, so the
    /// result reproduces [`BlockGrid::me_lookup`] for every covered id.
    /// Returns `None` when the choice covers no id.
    pub fn from_grid(grid: &BlockGrid, choice: &MeChoice) -> Result<Option<Self>> {
        let layout = grid.layout();
        let decoded = choice_to_mes(layout, choice)?;
        let Some(mes) = decoded.covered() else {
            return Ok(None);
        };
        let d = layout.dim();
        let mut buckets = Vec::new();
        let mut projections = Vec::new();
        let mut first_id = 0;
        for &(count, width) in mes.pairs() {
            let (s0, _) = layout.locate(first_id)?;
            let cols: Vec<usize> = (0..layout.num_col_chunks())
                .filter(|&t| choice.depths()[t] > s0)
                .collect();
            let mut data = Vec::with_capacity(count * width);
            for k in first_id..first_id + count {
                let (s, r) = layout.locate(k)?;
                for &t in &cols {
                    data.extend_from_slice(grid.block(s, t).row(r));
                }
            }
            buckets.push(Tensor::matrix(count, width, data)?);
            let mut p = Vec::with_capacity(width * d);
            for &t in &cols {
                p.extend_from_slice(grid.projection(t).data());
            }
            projections.push(Tensor::matrix(width, d, p)?);
            first_id += count;
        }
        MeLayer::from_parts(mes, buckets, projections).map(Some)
    }

    pub fn mes(&self) -> &Mes {
        &self.mes
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn vocab(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn bucket(&self, m: usize) -> &Tensor {
        &self.buckets[m]
    }

    pub fn projection(&self, m: usize) -> &Tensor {
        &self.projections[m]
    }

    pub fn bucket_param_count(&self) -> u64 {
        self.buckets.iter().map(|b| b.len() as u64).sum()
    }

    /// 0-based bucket holding `k` and the row inside it.
    pub fn locate(&self, k: usize) -> Result<(usize, usize)> {
        if k >= self.vocab() {
            return Err(NisError::contract(format!("id {k} outside vocabulary of {}", self.vocab())));
        }
        let m = self.bounds.partition_point(|&b| b <= k) - 1;
        Ok((m, k - self.bounds[m]))
    }

    /// `E_m[k - V_{m-1}] P_m` for the bucket `m` holding `k`.
    pub fn embed(&self, k: usize) -> Result<Tensor> {
        let (m, r) = self.locate(k)?;
        let mut out = vec![0.0; self.output_dim];
        project_into(self.buckets[m].row(r), &self.projections[m], &mut out);
        Tensor::vector(out)
    }

    /// Bag reduction that sums raw rows per bucket and projects each bucket
    /// once. An empty bag gives the zero vector.
    pub fn mbow(&self, ids: &[usize], reduction: Reduction) -> Result<Tensor> {
        let mut sums: Vec<Option<Vec<f64>>> = vec![None; self.buckets.len()];
        for &k in ids {
            let (m, r) = self.locate(k)?;
            let acc = sums[m].get_or_insert_with(|| vec![0.0; self.mes.pairs()[m].1]);
            axpy(1.0, self.buckets[m].row(r), acc);
        }
        let mut out = vec![0.0; self.output_dim];
        for (m, s) in sums.iter().enumerate() {
            if let Some(raw) = s {
                project_into(raw, &self.projections[m], &mut out);
            }
        }
        if reduction == Reduction::Mean && !ids.is_empty() {
            let n = ids.len() as f64;
            out.iter_mut().for_each(|x| *x /= n);
        }
        Tensor::vector(out)
    }

    /// Moves the weights into `store` as trainable parameters.
    pub fn into_store(self, store: &mut ParamStore, prefix: &str) -> Result<StoredMe> {
        let mut buckets = Vec::new();
        let mut projections = Vec::new();
        for (m, (b, p)) in self.buckets.into_iter().zip(self.projections).enumerate() {
            buckets.push(store.add(format!("{prefix}/bucket{m}"), b)?);
            projections.push(store.add(format!("{prefix}/proj{m}"), p)?);
        }
        Ok(StoredMe {
            mes: self.mes,
            bounds: self.bounds,
            buckets,
            projections,
            output_dim: self.output_dim,
        })
    }
}

fn project_into(raw: &[f64], projection: &Tensor, out: &mut [f64]) {
    for (i, &x) in raw.iter().enumerate() {
        axpy(x, projection.row(i), out);
    }
}

/// A multi-size layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StoredMe {
    mes: Mes,
    bounds: Vec<usize>,
    buckets: Vec<ParamId>,
    projections: Vec<ParamId>,
    output_dim: usize,
}

impl StoredMe {
    pub fn mes(&self) -> &Mes {
        &self.mes
    }

    pub fn bucket_ids(&self) -> &[ParamId] {
        &self.buckets
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Batched bag reduction on the tape: one output row per bag. Ids at or
    /// past the covered vocabulary contribute nothing.
    pub fn forward(&self, tape: &mut Tape<'_>, bags: &[Vec<usize>], reduction: Reduction) -> NodeId {
        let mut total: Option<NodeId> = None;
        for m in 0..self.buckets.len() {
            let (lo, hi) = (self.bounds[m], self.bounds[m + 1]);
            let local: Vec<Vec<usize>> = bags
                .iter()
                .map(|bag| bag.iter().filter(|&&k| k >= lo && k < hi).map(|&k| k - lo).collect())
                .collect();
            if local.iter().all(|b: &Vec<usize>| b.is_empty()) {
                continue;
            }
            let table = tape.param(self.buckets[m]);
            let raw = tape.gather_sum(table, local);
            let proj = tape.param(self.projections[m]);
            let part = tape.matmul(raw, proj);
            total = Some(match total {
                Some(t) => tape.add(t, part),
                None => part,
            });
        }
        let out = total.unwrap_or_else(|| tape.input(Tensor::zeros(&[bags.len(), self.output_dim])));
        match reduction {
            Reduction::Sum => out,
            Reduction::Mean => {
                let f = bags
                    .iter()
                    .map(|b| if b.is_empty() { 1.0 } else { 1.0 / b.len() as f64 })
                    .collect();
                tape.scale_rows(out, f)
            }
        }
    }

    pub fn snapshot(&self, store: &ParamStore) -> Result<MeLayer> {
        MeLayer::from_parts(
            self.mes.clone(),
            self.buckets.iter().map(|&b| store.get(b).clone()).collect(),
            self.projections.iter().map(|&p| store.get(p).clone()).collect(),
        )
    }
}
