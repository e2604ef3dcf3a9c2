//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records every op as a node whose
//! inputs are earlier nodes, so the node order is already a topological order
//! and backward is a single reverse sweep. Parameters are referenced, not
//! copied, until an op needs to read them.
//!
//! Ops with shape mismatches panic: graphs are built by this crate's own
//! model code, and a mismatch there is a bug, not an input error.

use std::borrow::Cow;

use crate::error::{NisError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Param(ParamId),
    Input,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    GatherSum {
        table: NodeId,
        bags: Vec<Vec<usize>>,
    },
    ConcatCols(Vec<NodeId>),
    ScaleRows(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Tensor,
    },
    SampledSoftmaxXent {
        query: NodeId,
        table: NodeId,
        bias: NodeId,
        candidates: Vec<Vec<usize>>,
        probs: Vec<Vec<f64>>,
    },
    SigmoidXent {
        logits: NodeId,
        labels: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Relu(_) => "relu",
            Op::GatherSum { .. } => "gather_sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ScaleRows(..) => "scale_rows",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::SampledSoftmaxXent { .. } => "sampled_softmax_xent",
            Op::SigmoidXent { .. } => "sigmoid_xent",
        }
    }
}

struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, value: Cow<'s, Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push(Cow::Owned(value), op)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.store.get(id);
        self.push(Cow::Borrowed(value), Op::Param(id))
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.owned(value, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.owned(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_bt(self.value(b));
        self.owned(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.owned(v, Op::Add(a, b))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bv = self.value(bias);
        let mut v = self.value(a).clone();
        assert_eq!(bv.len(), v.cols(), "bias length must equal column count");
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        self.owned(v, Op::AddRow(a, bias))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x <= 0.0 {
                *x = 0.0;
            }
        }
        self.owned(v, Op::Relu(a))
    }

    /// Row `i` of the output is the sum of `table` rows listed in `bags[i]`
    /// (empty bag gives a zero row). Backward scatter-adds into the table.
    pub fn gather_sum(&mut self, table: NodeId, bags: Vec<Vec<usize>>) -> NodeId {
        assert!(!bags.is_empty(), "gather_sum needs at least one bag");
        let t = self.value(table);
        let cols = t.cols();
        let rows = t.rows();
        let mut out = Tensor::zeros(&[bags.len(), cols]);
        for (i, bag) in bags.iter().enumerate() {
            let o = out.row_mut(i);
            for &r in bag {
                assert!(r < rows, "gather row {r} outside table of {rows} rows");
                axpy(1.0, t.row(r), o);
            }
        }
        self.owned(out, Op::GatherSum { table, bags })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&refs);
        self.owned(v, Op::ConcatCols(parts))
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f64>) -> NodeId {
        let mut v = self.value(a).clone();
        assert_eq!(factors.len(), v.rows(), "one factor per row");
        for (r, f) in factors.iter().enumerate() {
            for x in v.row_mut(r) {
                *x *= f;
            }
        }
        self.owned(v, Op::ScaleRows(a, factors))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale(factor);
        self.owned(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.owned(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.owned(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean softmax cross entropy of `logits` rows against `targets`.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per row");
        let mut probs = Tensor::zeros(&[l.rows(), l.cols()]);
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            assert!(y < l.cols(), "target {y} outside {} classes", l.cols());
            let lse = softmax_into(l.row(i), probs.row_mut(i));
            loss += lse - l.row(i)[y];
        }
        loss /= targets.len() as f64;
        self.owned(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Mean sampled-softmax cross entropy.
    ///
    /// For example `i`, logits are `query[i] · table[c] + bias[c]` over the
    /// candidate list `candidates[i]`, whose first entry is the true label.
    pub fn sampled_softmax_xent(
        &mut self,
        query: NodeId,
        table: NodeId,
        bias: NodeId,
        candidates: Vec<Vec<usize>>,
    ) -> NodeId {
        let q = self.value(query);
        let t = self.value(table);
        let b = self.value(bias);
        assert_eq!(q.rows(), candidates.len(), "one candidate list per row");
        assert_eq!(q.cols(), t.cols(), "query and table widths differ");
        assert_eq!(b.len(), t.rows(), "one bias per table row");
        let mut probs = Vec::with_capacity(candidates.len());
        let mut loss = 0.0;
        for (i, cands) in candidates.iter().enumerate() {
            assert!(!cands.is_empty(), "empty candidate list");
            let logits: Vec<f64> = cands
                .iter()
                .map(|&c| dot(q.row(i), t.row(c)) + b.data()[c])
                .collect();
            let mut p = vec![0.0; logits.len()];
            let lse = softmax_into(&logits, &mut p);
            loss += lse - logits[0];
            probs.push(p);
        }
        loss /= candidates.len() as f64;
        self.owned(
            Tensor::scalar(loss),
            Op::SampledSoftmaxXent {
                query,
                table,
                bias,
                candidates,
                probs,
            },
        )
    }

    /// Mean binary cross entropy of sigmoid(`logits`) against 0/1 `labels`.
    pub fn sigmoid_xent(&mut self, logits: NodeId, labels: Vec<f64>) -> NodeId {
        let l = self.value(logits);
        assert_eq!(l.len(), labels.len(), "one label per logit");
        let loss = l
            .data()
            .iter()
            .zip(&labels)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / labels.len() as f64;
        self.owned(Tensor::scalar(loss), Op::SigmoidXent { logits, labels })
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<(f64, Gradients)> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NisError::contract(format!(
                "loss node {} has shape {:?}, expected a scalar",
                loss.0,
                lv.shape()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !n.value.is_finite() {
                return Err(NisError::Numeric {
                    node: i,
                    op: n.op.name(),
                });
            }
        }
        let mut out = Gradients::zeros_like(self.store);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Param(id) => out.get_mut(*id).add_assign(&g),
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul_bt(bv));
                    accumulate(&mut grads, *b, av.matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, g.matmul(bv));
                    accumulate(&mut grads, *b, g.matmul_at(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    let shape = self.value(*bias).shape().to_vec();
                    let mut gb = Tensor::zeros(&shape);
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), gb.data_mut());
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherSum { table, bags } => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (b, bag) in bags.iter().enumerate() {
                        for &r in bag {
                            axpy(1.0, g.row(b), gt.row_mut(r));
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let c = pv.cols();
                        let mut gp = Tensor::zeros(&[pv.rows(), c]);
                        for r in 0..pv.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::ScaleRows(a, factors) => {
                    let mut ga = g;
                    for (r, f) in factors.iter().enumerate() {
                        for x in ga.row_mut(r) {
                            *x *= f;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, f) => {
                    let mut ga = g;
                    ga.scale(*f);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let shape = self.value(*a).shape().to_vec();
                    let n = shape.iter().product();
                    accumulate(&mut grads, *a, Tensor::new(shape, vec![s; n])?);
                }
                Op::Mean(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let n: usize = shape.iter().product();
                    let s = g.data()[0] / n as f64;
                    accumulate(&mut grads, *a, Tensor::new(shape, vec![s; n])?);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &y) in targets.iter().enumerate() {
                        gl.row_mut(r)[y] -= 1.0;
                    }
                    gl.scale(scale);
                    accumulate(&mut grads, *logits, gl);
                }
                Op::SampledSoftmaxXent {
                    query,
                    table,
                    bias,
                    candidates,
                    probs,
                } => {
                    let scale = g.data()[0] / candidates.len() as f64;
                    let q = self.value(*query);
                    let t = self.value(*table);
                    let mut gq = Tensor::zeros(q.shape());
                    let mut gt = Tensor::zeros(t.shape());
                    let mut gb = Tensor::zeros(self.value(*bias).shape());
                    for (i, cands) in candidates.iter().enumerate() {
                        for (j, &c) in cands.iter().enumerate() {
                            let indicator = if j == 0 { 1.0 } else { 0.0 };
                            let dl = scale * (probs[i][j] - indicator);
                            axpy(dl, t.row(c), gq.row_mut(i));
                            axpy(dl, q.row(i), gt.row_mut(c));
                            gb.data_mut()[c] += dl;
                        }
                    }
                    accumulate(&mut grads, *query, gq);
                    accumulate(&mut grads, *table, gt);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::SigmoidXent { logits, labels } => {
                    let scale = g.data()[0] / labels.len() as f64;
                    let lv = self.value(*logits);
                    let data = lv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&x, &y)| scale * (sigmoid(x) - y))
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), data)?);
                }
            }
        }
        for (id, g) in out.iter() {
            if !g.is_finite() {
                return Err(NisError::Numeric {
                    node: id.index(),
                    op: "gradient",
                });
            }
        }
        Ok((lv.data()[0], out))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut grads[node.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Writes softmax of `logits` into `out` and returns log-sum-exp.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Builds a graph with `build` and differentiates its scalar output.
pub fn forward_backward<F>(store: &ParamStore, build: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<NodeId>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    tape.backward(loss)
}

/// Largest relative disagreement between analytic gradients and central
/// finite differences, over every scalar of every parameter in `store`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn check_gradients<F>(store: &ParamStore, build: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps < 1e-2) {
        return Err(NisError::contract(format!("eps must lie in (0, 1e-2), got {eps}")));
    }
    let (_, analytic) = forward_backward(store, &build)?;
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let original = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = original + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = original - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_sum_gradient_is_outer_product_with_ones() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let (loss, grads) = forward_backward(&store, |t| {
            let wn = t.param(w);
            let x = t.input(Tensor::matrix(2, 1, vec![1., 1.]).unwrap());
            let y = t.matmul(wn, x);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(loss, 10.0);
        assert_eq!(grads.get(w).data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(-3.0)).unwrap();
        let (loss, grads) = forward_backward(&store, |t| {
            let n = t.param(x);
            let r = t.relu(n);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.get(x).data(), &[0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0)).unwrap();
        let (_, grads) = forward_backward(&store, |t| {
            let n = t.param(x);
            let r = t.relu(n);
            Ok(t.sum(r))
        })
        .unwrap();
        assert_eq!(grads.get(x).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[2])).unwrap();
        let r = forward_backward(&store, |t| Ok(t.param(w)));
        assert!(matches!(r, Err(NisError::Contract(_))));
    }

    #[test]
    fn nan_forward_value_reports_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(f64::NAN)).unwrap();
        let r = forward_backward(&store, |t| {
            let n = t.param(w);
            Ok(t.sum(n))
        });
        assert!(matches!(r, Err(NisError::Numeric { node: 0, .. })));
    }

    #[test]
    fn unreached_parameters_get_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::scalar(2.0)).unwrap();
        let b = store.add("b", Tensor::zeros(&[3, 2])).unwrap();
        let (_, grads) = forward_backward(&store, |t| {
            let n = t.param(a);
            Ok(t.sum(n))
        })
        .unwrap();
        assert_eq!(grads.get(b), &Tensor::zeros(&[3, 2]));
        assert_eq!(grads.get(a).data(), &[1.0]);
    }

    #[test]
    fn linear_graph_gradient_check_is_tight() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::matrix(2, 3, vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.7]).unwrap())
            .unwrap();
        let err = check_gradients(
            &store,
            |t| {
                let x = t.input(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
                let wn = t.param(w);
                let y = t.matmul(wn, x);
                Ok(t.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        // 10 scalars: w1 2x3, w2 3x1, b2 1.
        let w1 = store.add("w1", Tensor::uniform(&[2, 3], 1.0, &mut rng)).unwrap();
        let w2 = store.add("w2", Tensor::uniform(&[3, 1], 1.0, &mut rng)).unwrap();
        let b2 = store.add("b2", Tensor::uniform(&[1], 1.0, &mut rng)).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_gradients(
            &store,
            |t| {
                let xn = t.input(Tensor::matrix(4, 2, x.clone()).unwrap());
                let w1n = t.param(w1);
                let h = t.matmul(xn, w1n);
                let h = t.relu(h);
                let w2n = t.param(w2);
                let o = t.matmul(h, w2n);
                let b = t.param(b2);
                let o = t.add_row(o, b);
                Ok(t.sigmoid_xent(o, vec![1.0, 0.0, 1.0, 0.0]))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn batch_gradient_is_sum_of_example_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::uniform(&[3, 4], 1.0, &mut rng)).unwrap();
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let run = |rows: &[Vec<f64>]| {
            forward_backward(&store, |t| {
                let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                let x = t.input(Tensor::matrix(rows.len(), 3, flat).unwrap());
                let wn = t.param(w);
                let h = t.matmul(x, wn);
                let h = t.relu(h);
                Ok(t.sum(h))
            })
            .unwrap()
            .1
        };
        let batch = run(&xs);
        let mut summed = Gradients::zeros_like(&store);
        for x in &xs {
            summed.add_assign(&run(std::slice::from_ref(x)));
        }
        for (a, b) in batch.get(w).data().iter().zip(summed.get(w).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
