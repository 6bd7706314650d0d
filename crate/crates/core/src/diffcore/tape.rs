//! Reverse-mode gradient tape over [`Tensor2D`] values.
//!
//! Operations are appended in evaluation order, so the node list is already
//! a topological order; `backward` replays it from the root down to node 0.
//! Nodes that depend on no trainable leaf carry `requires_grad = false` and
//! are skipped during replay.

use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic and batch-statistic layers run in training or
/// inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Assignment of fine nodes to coarse groups, consumed by the pooling ops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupIndex {
    fine: usize,
    members: Vec<Vec<usize>>,
}

impl GroupIndex {
    /// `members[j]` lists the fine indices pooled into coarse node `j`.
    pub fn new(fine: usize, mut members: Vec<Vec<usize>>) -> Result<Self> {
        for (j, m) in members.iter_mut().enumerate() {
            m.sort_unstable();
            m.dedup();
            if let Some(&bad) = m.iter().find(|&&i| i >= fine) {
                return Err(Error::Shape(format!(
                    "group {j} references fine node {bad} but only {fine} exist"
                )));
            }
        }
        Ok(Self { fine, members })
    }

    pub fn fine(&self) -> usize {
        self.fine
    }

    pub fn coarse(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    pub fn first_empty(&self) -> Option<usize> {
        self.members.iter().position(Vec::is_empty)
    }
}

/// Running batch statistics for one batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Tensor2D<T>,
    pub running_var: Tensor2D<T>,
}

impl<T: Real> BatchNormStats<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        Self {
            running_mean: Tensor2D::zeros(1, features),
            running_var: Tensor2D::ones(1, features),
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.cols()
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Select(Var, usize, usize),
    Transpose(Var),
    VStack(Vec<Var>),
    Relu(Var),
    Softmax(Var),
    Dropout(Var, Vec<T>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GroupSum(Var, Arc<GroupIndex>),
    GroupMean(Var, Arc<GroupIndex>),
    GroupMax(Var, Vec<usize>),
    WeightedCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        weights: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor2D<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor2D<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor2D<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; gradients are reported for it.
    pub fn param(&mut self, value: Tensor2D<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor2D<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Non-trainable leaf sharing storage with the caller.
    pub fn constant_shared(&mut self, value: Arc<Tensor2D<T>>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor2D<T>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of a `B×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::Shape(format!(
                "row broadcast of {}x{} onto {}x{}",
                rv.rows(),
                rv.cols(),
                xv.rows(),
                xv.cols()
            )));
        }
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + rv.data()[k % cols])
            .collect();
        let out = Tensor2D::from_op(xv.rows(), cols, data, "add_row")?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).scale(s)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    /// Sum of all elements as a `1×1` node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let out = Tensor2D::from_op(1, 1, vec![s], "sum")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    /// Single element as a `1×1` node.
    pub fn select(&mut self, x: Var, row: usize, col: usize) -> Result<Var> {
        let xv = self.value(x);
        if row >= xv.rows() || col >= xv.cols() {
            return Err(Error::Shape(format!(
                "select ({row}, {col}) from {}x{}",
                xv.rows(),
                xv.cols()
            )));
        }
        let out = Tensor2D::from_vec_unchecked(1, 1, vec![xv.get(row, col)]);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Select(x, row, col), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("vstack of zero parts".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape(format!(
                    "vstack part {}x{} does not match {cols} columns",
                    v.rows(),
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2D::from_vec_unchecked(rows, cols, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::VStack(parts.to_vec()), rg))
    }

    /// Concatenates column vectors into one longer column vector, in order.
    pub fn concat_cols_as_stack(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            let v = self.value(p);
            if !v.is_column() {
                return Err(Error::Shape(format!(
                    "concat expects column vectors, got {}x{}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        self.vstack(parts)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor2D::from_vec_unchecked(xv.rows(), xv.cols(), data);
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax with max shift.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x`
    /// itself without recording a node.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = T::lit(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let mask: Vec<T> = (0..xv.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor2D::from_op(xv.rows(), xv.cols(), data, "dropout")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, mask), rg))
    }

    fn check_bn_shapes(&self, x: Var, gamma: Var, beta: Var, stats: &BatchNormStats<T>) -> Result<()> {
        let f = self.value(x).cols();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(v).shape();
            if s != (1, f) {
                return Err(Error::Shape(format!(
                    "batchnorm {name} is {}x{}, expected 1x{f}",
                    s.0, s.1
                )));
            }
        }
        if stats.features() != f {
            return Err(Error::Shape(format!(
                "batchnorm stats cover {} features, input has {f}",
                stats.features()
            )));
        }
        Ok(())
    }

    /// Batch normalisation over the batch axis using batch statistics;
    /// updates the running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
    ) -> Result<Var> {
        self.check_bn_shapes(x, gamma, beta, stats)?;
        let xv = self.value(x);
        let (b, f) = xv.shape();
        if b < 2 {
            return Err(Error::Input(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let bt = T::from_usize(b).unwrap();
        let eps = T::lit(BatchNormStats::<T>::EPS);
        let mut mean = vec![T::zero(); f];
        for i in 0..b {
            for (m, &v) in mean.iter_mut().zip(xv.row(i)) {
                *m = *m + v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / bt);
        let mut var = vec![T::zero(); f];
        for i in 0..b {
            for ((s, &v), &m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                let d = v - m;
                *s = *s + d * d;
            }
        }
        var.iter_mut().for_each(|s| *s = *s / bt);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(b * f);
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + be[j]);
            }
        }
        let out = Tensor2D::from_op(b, f, out, "batchnorm")?;

        let momentum = T::lit(BatchNormStats::<T>::MOMENTUM);
        let unbias = bt / (bt - T::one());
        let rm: Vec<T> = stats
            .running_mean
            .data()
            .iter()
            .zip(&mean)
            .map(|(&r, &m)| (T::one() - momentum) * r + momentum * m)
            .collect();
        let rv: Vec<T> = stats
            .running_var
            .data()
            .iter()
            .zip(&var)
            .map(|(&r, &v)| (T::one() - momentum) * r + momentum * v * unbias)
            .collect();
        stats.running_mean = Tensor2D::from_op(1, f, rm, "batchnorm running mean")?;
        stats.running_var = Tensor2D::from_op(1, f, rv, "batchnorm running var")?;

        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            rg,
        ))
    }

    /// Batch normalisation with the running statistics; does not mutate them.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &BatchNormStats<T>,
    ) -> Result<Var> {
        self.check_bn_shapes(x, gamma, beta, stats)?;
        let xv = self.value(x);
        let (b, f) = xv.shape();
        let eps = T::lit(BatchNormStats::<T>::EPS);
        let mean = stats.running_mean.data();
        let inv_std: Vec<T> = stats
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(b * f);
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let h = (v - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + be[j]);
            }
        }
        let out = Tensor2D::from_op(b, f, out, "batchnorm")?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn check_groups(&self, x: Var, groups: &GroupIndex) -> Result<()> {
        let rows = self.value(x).rows();
        if rows != groups.fine() {
            return Err(Error::Shape(format!(
                "pooling input has {rows} rows, mapping expects {}",
                groups.fine()
            )));
        }
        Ok(())
    }

    /// `out[j] = Σ_{i ∈ group j} x[i]`, i.e. `Mᵀx` for a binary `M`.
    pub fn group_sum(&mut self, x: Var, groups: &Arc<GroupIndex>) -> Result<Var> {
        self.check_groups(x, groups)?;
        let out = group_accumulate(self.value(x), groups, false);
        let out = Tensor2D::from_op(out.0, out.1, out.2, "sum pooling")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupSum(x, Arc::clone(groups)), rg))
    }

    /// Group mean; every group must be non-empty.
    pub fn group_mean(&mut self, x: Var, groups: &Arc<GroupIndex>) -> Result<Var> {
        self.check_groups(x, groups)?;
        if let Some(j) = groups.first_empty() {
            return Err(Error::EmptyGroup(j));
        }
        let out = group_accumulate(self.value(x), groups, true);
        let out = Tensor2D::from_op(out.0, out.1, out.2, "average pooling")?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupMean(x, Arc::clone(groups)), rg))
    }

    /// Group maximum; ties resolve to the lowest fine index.
    pub fn group_max(&mut self, x: Var, groups: &Arc<GroupIndex>) -> Result<Var> {
        self.check_groups(x, groups)?;
        if let Some(j) = groups.first_empty() {
            return Err(Error::EmptyGroup(j));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let p = groups.coarse();
        let mut out = Vec::with_capacity(p * c);
        let mut argmax = Vec::with_capacity(p * c);
        for j in 0..p {
            let members = groups.members(j);
            for col in 0..c {
                let mut best = members[0];
                for &i in &members[1..] {
                    if xv.get(i, col) > xv.get(best, col) {
                        best = i;
                    }
                }
                argmax.push(best);
                out.push(xv.get(best, col));
            }
        }
        let out = Tensor2D::from_vec_unchecked(p, c, out);
        let rg = self.rg(x);
        Ok(self.push(out, Op::GroupMax(x, argmax), rg))
    }

    /// Mean over the batch of `w[y] · (−ln softmax(z)[y])`, evaluated with
    /// log-sum-exp.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let z = self.value(logits);
        let (b, c) = z.shape();
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "{} labels for a batch of {b}",
                labels.len()
            )));
        }
        if weights.len() != c {
            return Err(Error::Shape(format!(
                "{} class weights for {c} classes",
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let probs = softmax_rows(z);
        let bt = T::from_usize(b).unwrap();
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + weights[y] * (lse - row[y]);
        }
        let out = Tensor2D::from_op(1, 1, vec![loss / bt], "cross entropy")?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::WeightedCe {
                logits,
                probs: probs.into_data(),
                labels: labels.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {}x{}",
                rv.rows(),
                rv.cols()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let (rows, cols) = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.rg(*a) {
                    // ga = g · bᵀ
                    let mut ga = vec![T::zero(); n * k];
                    for i in 0..n {
                        let g_row = &g[i * m..(i + 1) * m];
                        for kk in 0..k {
                            let b_row = bv.row(kk);
                            ga[i * k + kk] = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb = aᵀ · g
                    let mut gb = vec![T::zero(); k * m];
                    for i in 0..n {
                        let g_row = &g[i * m..(i + 1) * m];
                        for (kk, &a_ik) in av.row(i).iter().enumerate() {
                            if a_ik == T::zero() {
                                continue;
                            }
                            let gb_row = &mut gb[kk * m..(kk + 1) * m];
                            for (o, &x) in gb_row.iter_mut().zip(g_row) {
                                *o = *o + a_ik * x;
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.rg(*row) {
                    let mut gr = vec![T::zero(); cols];
                    for i in 0..rows {
                        for (o, &v) in gr.iter_mut().zip(&g[i * cols..(i + 1) * cols]) {
                            *o = *o + v;
                        }
                    }
                    accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Select(x, r, c) => {
                let xv = self.value(*x);
                let mut gx = vec![T::zero(); xv.len()];
                gx[r * xv.cols() + c] = g[0];
                accumulate(grads, *x, gx);
            }
            Op::Transpose(x) => {
                // node is cols_x × rows_x; g transposed back
                let mut gx = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        gx[j * rows + i] = g[i * cols + j];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = xv
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let gr = &g[i * cols..(i + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        gx[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Dropout(x, mask) => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect());
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (b, f) = (rows, cols);
                let gam = self.value(*gamma).data();
                if self.rg(*beta) {
                    let mut gb = vec![T::zero(); f];
                    for i in 0..b {
                        for j in 0..f {
                            gb[j] = gb[j] + g[i * f + j];
                        }
                    }
                    accumulate(grads, *beta, gb);
                }
                if self.rg(*gamma) {
                    let mut gg = vec![T::zero(); f];
                    for i in 0..b {
                        for j in 0..f {
                            gg[j] = gg[j] + g[i * f + j] * xhat[i * f + j];
                        }
                    }
                    accumulate(grads, *gamma, gg);
                }
                if self.rg(*x) {
                    let mut gx = vec![T::zero(); b * f];
                    if *batch_stats {
                        let bt = T::from_usize(b).unwrap();
                        for j in 0..f {
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for i in 0..b {
                                let d = g[i * f + j] * gam[j];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat[i * f + j];
                            }
                            for i in 0..b {
                                let d = g[i * f + j] * gam[j];
                                gx[i * f + j] = inv_std[j] / bt
                                    * (bt * d - sum_d - xhat[i * f + j] * sum_dx);
                            }
                        }
                    } else {
                        for i in 0..b {
                            for j in 0..f {
                                gx[i * f + j] = g[i * f + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::GroupSum(x, groups) | Op::GroupMean(x, groups) => {
                let mean = matches!(node.op, Op::GroupMean(..));
                let c = cols;
                let mut gx = vec![T::zero(); groups.fine() * c];
                for j in 0..groups.coarse() {
                    let members = groups.members(j);
                    let scale = if mean {
                        T::one() / T::from_usize(members.len()).unwrap()
                    } else {
                        T::one()
                    };
                    for &i in members {
                        for col in 0..c {
                            gx[i * c + col] = gx[i * c + col] + g[j * c + col] * scale;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::GroupMax(x, argmax) => {
                let xv = self.value(*x);
                let c = cols;
                let mut gx = vec![T::zero(); xv.len()];
                for (k, &i) in argmax.iter().enumerate() {
                    let col = k % c;
                    gx[i * c + col] = gx[i * c + col] + g[k];
                }
                accumulate(grads, *x, gx);
            }
            Op::WeightedCe {
                logits,
                probs,
                labels,
                weights,
            } => {
                let zv = self.value(*logits);
                let (b, c) = zv.shape();
                let bt = T::from_usize(b).unwrap();
                let mut gz = vec![T::zero(); b * c];
                for (i, &y) in labels.iter().enumerate() {
                    let w = weights[y] / bt * g[0];
                    for j in 0..c {
                        let target = if j == y { T::one() } else { T::zero() };
                        gz[i * c + j] = w * (probs[i * c + j] - target);
                    }
                }
                accumulate(grads, *logits, gz);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e = *e + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn group_accumulate<T: Real>(
    x: &Tensor2D<T>,
    groups: &GroupIndex,
    mean: bool,
) -> (usize, usize, Vec<T>) {
    let c = x.cols();
    let p = groups.coarse();
    let mut out = vec![T::zero(); p * c];
    for j in 0..p {
        let members = groups.members(j);
        for &i in members {
            for col in 0..c {
                out[j * c + col] = out[j * c + col] + x.get(i, col);
            }
        }
        if mean && !members.is_empty() {
            let n = T::from_usize(members.len()).unwrap();
            for col in 0..c {
                out[j * c + col] = out[j * c + col] / n;
            }
        }
    }
    (p, c, out)
}

/// Row-wise softmax with max shift; every output is strictly positive.
pub fn softmax_rows<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let (r, c) = x.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor2D::from_vec_unchecked(r, c, out)
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; exactly zero when `v` was not reached.
    ///
    /// Panics if `v` was created after the backward pass.
    pub fn wrt(&self, v: Var) -> Tensor2D<T> {
        let (r, c) = *self
            .shapes
            .get(v.0)
            .expect("variable created after the backward pass");
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor2D::from_vec_unchecked(r, c, g.clone()),
            None => Tensor2D::zeros(r, c),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        matches!(self.grads.get(v.0), Some(Some(_)))
    }
}
