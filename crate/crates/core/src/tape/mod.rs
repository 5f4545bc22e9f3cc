//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is an append-only arena of nodes. Forward ops push nodes
//! and record which inputs they read; [`Tape::backward`] walks the arena
//! in reverse creation order and accumulates exact gradients. One tape
//! lives for one forward/backward pass; parameters persist outside the
//! tape in a [`ParamStore`] and are re-leafed each pass.
//!
//! All arithmetic is 64-bit. There is no broadcasting except the bias
//! vector inside [`Tape::affine`]; any other shape mismatch is rejected
//! when the graph is built, naming both shapes.

mod adam;
mod array;
mod checkpoint;
mod rng;

pub use adam::{adam_step, AdamState, ParamStore};
pub use array::Array;
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use rng::{derive_seed, rng_for};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("bad shape: {what}")]
    BadShape { what: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: invalid argument: {what}")]
    BadArg { op: &'static str, what: String },
}

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Array,
    grad: Array,
    op: Op,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Abs(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Affine {
        w: NodeId,
        b: NodeId,
        x: NodeId,
    },
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    MeanPoolMasked {
        x: NodeId,
        mask: NodeId,
        denoms: Vec<f64>,
    },
    SumPoolScaled {
        x: NodeId,
        mask: NodeId,
    },
    ConcatLast(NodeId, NodeId),
    ShiftSeq {
        x: NodeId,
        delta: i64,
    },
    CausalConvAllOnes {
        x: NodeId,
        len: usize,
    },
    TotalVariationSeq(NodeId),
    MeanAll(NodeId),
    SumLast(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    StraightThrough {
        soft: NodeId,
    },
    Reshape(NodeId),
}

/// Denominator guard for the masked mean pool: rows whose mask sums to
/// zero pool to zeros instead of dividing by zero.
const POOL_EPS: f64 = 1e-8;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        let grad = Array::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input node (parameter or constant data).
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TapeError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TapeError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Array::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Array::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        self.same_shape("elementwise_mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Array::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v + c).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| -v).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Neg(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.abs()).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Abs(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| sigmoid(*v)).collect();
        let value = Array::from_vec(self.value(x).shape(), data).unwrap();
        self.push(value, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let v = self.value(x);
        let c = v.last_dim();
        if c == 0 || v.rank() == 0 {
            return Err(TapeError::BadArg {
                op: "softmax",
                what: format!("needs a non-empty last axis, got shape {:?}", v.shape()),
            });
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let value = Array::from_vec(v.shape(), data)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    /// `x · W + b` applied over the last axis of `x`.
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId, TapeError> {
        let (ws, bs, xs) = (
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
            self.value(x).shape().to_vec(),
        );
        if ws.len() != 2 {
            return Err(TapeError::BadArg {
                op: "affine",
                what: format!("weight must be rank 2, got {ws:?}"),
            });
        }
        let (d_in, d_out) = (ws[0], ws[1]);
        if bs != [d_out] {
            return Err(TapeError::ShapeMismatch {
                op: "affine(bias)",
                lhs: bs,
                rhs: vec![d_out],
            });
        }
        if xs.is_empty() || *xs.last().unwrap() != d_in {
            return Err(TapeError::ShapeMismatch {
                op: "affine(input)",
                lhs: xs,
                rhs: ws,
            });
        }
        let rows = self.value(x).rows();
        let mut out = vec![0.0; rows * d_out];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for r in 0..rows {
                let xrow = &xv[r * d_in..(r + 1) * d_in];
                let orow = &mut out[r * d_out..(r + 1) * d_out];
                orow.copy_from_slice(bv);
                for (i, &xi) in xrow.iter().enumerate() {
                    if xi != 0.0 {
                        let wrow = &wv[i * d_out..(i + 1) * d_out];
                        for (o, &wio) in orow.iter_mut().zip(wrow) {
                            *o += xi * wio;
                        }
                    }
                }
            }
        }
        let mut oshape = xs.clone();
        *oshape.last_mut().unwrap() = d_out;
        let value = Array::from_vec(&oshape, out)?;
        Ok(self.push(value, Op::Affine { w, b, x }))
    }

    /// Row lookup: `table` is `[V, D]`, `ids` has shape `ids_shape`; the
    /// result appends a `D` axis.
    pub fn embed(
        &mut self,
        table: NodeId,
        ids: &[u32],
        ids_shape: &[usize],
    ) -> Result<NodeId, TapeError> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(TapeError::BadArg {
                op: "embed",
                what: format!("table must be rank 2, got {ts:?}"),
            });
        }
        let (v, d) = (ts[0], ts[1]);
        let expect: usize = ids_shape.iter().product();
        if ids.len() != expect {
            return Err(TapeError::BadArg {
                op: "embed",
                what: format!("{} ids do not fill shape {ids_shape:?}", ids.len()),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(TapeError::BadArg {
                op: "embed",
                what: format!("token id {bad} out of range for vocab {v}"),
            });
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id as usize * d..(id as usize + 1) * d]);
        }
        let mut oshape = ids_shape.to_vec();
        oshape.push(d);
        let value = Array::from_vec(&oshape, out)?;
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Sum of the selected positions scaled by the fixed sequence
    /// length: `x` is `[B, N, D]`, `mask` is `[B, N]`, result is
    /// `[B, D]` with `out[b,d] = sum_n mask[b,n] * x[b,n,d] / N`.
    /// Unlike [`mean_pool_masked`](Self::mean_pool_masked), each mask
    /// bit contributes independently of how many others are selected.
    pub fn sum_pool_scaled(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId, TapeError> {
        let xs = self.value(x).shape().to_vec();
        let ms = self.value(mask).shape().to_vec();
        if xs.len() != 3 || ms.len() != 2 || xs[0] != ms[0] || xs[1] != ms[1] {
            return Err(TapeError::ShapeMismatch {
                op: "sum_pool_scaled",
                lhs: xs,
                rhs: ms,
            });
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mv = self.value(mask).data();
        let mut out = vec![0.0; b * d];
        let scale = 1.0 / n as f64;
        for bi in 0..b {
            for ni in 0..n {
                let m = mv[bi * n + ni];
                if m != 0.0 {
                    let xrow = &xv[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                    let orow = &mut out[bi * d..(bi + 1) * d];
                    for (o, &xi) in orow.iter_mut().zip(xrow) {
                        *o += m * xi * scale;
                    }
                }
            }
        }
        let value = Array::from_vec(&[b, d], out)?;
        Ok(self.push(value, Op::SumPoolScaled { x, mask }))
    }

    /// Mean over the selected positions of a sequence: `x` is `[B, N, D]`,
    /// `mask` is `[B, N]`, result is `[B, D]`. Rows with an all-zero mask
    /// pool to zeros (the denominator is guarded by a small epsilon).
    pub fn mean_pool_masked(&mut self, x: NodeId, mask: NodeId) -> Result<NodeId, TapeError> {
        let xs = self.value(x).shape().to_vec();
        let ms = self.value(mask).shape().to_vec();
        if xs.len() != 3 || ms.len() != 2 || xs[0] != ms[0] || xs[1] != ms[1] {
            return Err(TapeError::ShapeMismatch {
                op: "mean_pool_masked",
                lhs: xs,
                rhs: ms,
            });
        }
        let (b, n, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mv = self.value(mask).data();
        let mut out = vec![0.0; b * d];
        let mut denoms = vec![0.0; b];
        for bi in 0..b {
            let denom: f64 = mv[bi * n..(bi + 1) * n].iter().sum::<f64>() + POOL_EPS;
            denoms[bi] = denom;
            for ni in 0..n {
                let m = mv[bi * n + ni];
                if m != 0.0 {
                    let xrow = &xv[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                    let orow = &mut out[bi * d..(bi + 1) * d];
                    for (o, &xi) in orow.iter_mut().zip(xrow) {
                        *o += m * xi;
                    }
                }
            }
            for o in &mut out[bi * d..(bi + 1) * d] {
                *o /= denom;
            }
        }
        let value = Array::from_vec(&[b, d], out)?;
        Ok(self.push(value, Op::MeanPoolMasked { x, mask, denoms }))
    }

    /// Concatenate along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.is_empty()
            || sb.is_empty()
            || sa.len() != sb.len()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(TapeError::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).rows();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut oshape = sa.clone();
        *oshape.last_mut().unwrap() = da + db;
        let value = Array::from_vec(&oshape, out)?;
        Ok(self.push(value, Op::ConcatLast(a, b)))
    }

    /// Shift a sequence along axis 1 by `delta` positions, zero-filling
    /// vacated slots: `out[b, t] = x[b, t - delta]`.
    pub fn shift_seq(&mut self, x: NodeId, delta: i64) -> Result<NodeId, TapeError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() < 2 {
            return Err(TapeError::BadArg {
                op: "shift_seq",
                what: format!("needs rank >= 2, got {xs:?}"),
            });
        }
        let b = xs[0];
        let n = xs[1];
        let inner: usize = xs[2..].iter().product::<usize>().max(1);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for t in 0..n as i64 {
                let src = t - delta;
                if src >= 0 && src < n as i64 {
                    let dst_off = (bi * n + t as usize) * inner;
                    let src_off = (bi * n + src as usize) * inner;
                    out[dst_off..dst_off + inner].copy_from_slice(&xv[src_off..src_off + inner]);
                }
            }
        }
        let value = Array::from_vec(&xs, out)?;
        Ok(self.push(value, Op::ShiftSeq { x, delta }))
    }

    /// Causal convolution with an all-ones kernel of length `l` over the
    /// last axis: `out[n] = sum of x[max(0, n-l+1) ..= n]`. Positions with
    /// fewer than `l` predecessors sum over what exists.
    pub fn causal_conv_allones(&mut self, x: NodeId, l: usize) -> Result<NodeId, TapeError> {
        if l == 0 {
            return Err(TapeError::BadArg {
                op: "causal_conv_allones",
                what: "kernel length must be >= 1".into(),
            });
        }
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(TapeError::BadArg {
                op: "causal_conv_allones",
                what: "needs rank >= 1".into(),
            });
        }
        let n = *xs.last().unwrap();
        let rows = self.value(x).rows();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xrow = &xv[r * n..(r + 1) * n];
            let orow = &mut out[r * n..(r + 1) * n];
            // Running window sum; exact (no subtraction drift) at these sizes.
            for ni in 0..n {
                let lo = ni.saturating_sub(l - 1);
                orow[ni] = xrow[lo..=ni].iter().sum();
            }
        }
        let value = Array::from_vec(&xs, out)?;
        Ok(self.push(value, Op::CausalConvAllOnes { x, len: l }))
    }

    /// Per-row total variation of a `[B, N]` sequence:
    /// `sum over n >= 1 of |x[n] - x[n-1]|`, result `[B]`.
    pub fn total_variation_seq(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(TapeError::BadArg {
                op: "total_variation_seq",
                what: format!("needs rank 2, got {xs:?}"),
            });
        }
        let (b, n) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; b];
        for bi in 0..b {
            let row = &xv[bi * n..(bi + 1) * n];
            out[bi] = row.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
        }
        let value = Array::from_vec(&[b], out)?;
        Ok(self.push(value, Op::TotalVariationSeq(x)))
    }

    /// Mean of every element; result is a scalar.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Array::scalar(mean), Op::MeanAll(x))
    }

    /// Sum over the last axis: `[..., C]` to `[...]`.
    pub fn sum_last(&mut self, x: NodeId) -> Result<NodeId, TapeError> {
        let xs = self.value(x).shape().to_vec();
        if xs.is_empty() {
            return Err(TapeError::BadArg {
                op: "sum_last",
                what: "needs rank >= 1".into(),
            });
        }
        let c = *xs.last().unwrap();
        let rows = self.value(x).rows();
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..rows).map(|r| xv[r * c..(r + 1) * c].iter().sum()).collect();
        let value = Array::from_vec(&xs[..xs.len() - 1], out)?;
        Ok(self.push(value, Op::SumLast(x)))
    }

    /// Per-row cross-entropy of softmaxed logits against integer labels:
    /// logits `[B, C]`, labels length `B`, result `[B]` in nats.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TapeError> {
        let ls = self.value(logits).shape().to_vec();
        if ls.len() != 2 {
            return Err(TapeError::BadArg {
                op: "softmax_cross_entropy",
                what: format!("logits must be rank 2, got {ls:?}"),
            });
        }
        let (b, c) = (ls[0], ls[1]);
        if labels.len() != b {
            return Err(TapeError::BadArg {
                op: "softmax_cross_entropy",
                what: format!("{} labels for batch {b}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TapeError::BadArg {
                op: "softmax_cross_entropy",
                what: format!("label {bad} out of range for {c} classes"),
            });
        }
        let lv = self.value(logits).data();
        let mut probs = lv.to_vec();
        let mut out = vec![0.0; b];
        for (bi, row) in probs.chunks_mut(c).enumerate() {
            let logsum = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - logsum).exp();
            }
            // -ln p[label], recomputed in log space for stability
            out[bi] = logsum - lv[bi * c + labels[bi]];
        }
        let value = Array::from_vec(&[b], out)?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Straight-through estimator: the forward value is exactly `hard`;
    /// the backward pass routes gradients to `soft` unchanged.
    pub fn straight_through(&mut self, hard: Array, soft: NodeId) -> Result<NodeId, TapeError> {
        if hard.shape() != self.value(soft).shape() {
            return Err(TapeError::ShapeMismatch {
                op: "straight_through",
                lhs: hard.shape().to_vec(),
                rhs: self.value(soft).shape().to_vec(),
            });
        }
        Ok(self.push(hard, Op::StraightThrough { soft }))
    }

    /// Reinterpret the data with a new shape of the same total length.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TapeError> {
        let value = Array::from_vec(shape, self.value(x).data().to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Accumulates gradients of a scalar `loss` into every reachable node.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;
        for i in (0..=loss.0).rev() {
            let go = self.nodes[i].grad.clone();
            if go.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            self.propagate(i, &go);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, go: &Array) {
        // Split borrows: the op is moved out of reach via raw index use.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, go.data().iter().copied());
                self.accumulate(b, go.data().iter().copied());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, go.data().iter().copied());
                self.accumulate(b, go.data().iter().map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let gb: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, av)| g * av)
                    .collect();
                let ga: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(g, bv)| g * bv)
                    .collect();
                self.accumulate(a, ga.into_iter());
                self.accumulate(b, gb.into_iter());
            }
            Op::Scale(x, c) => {
                let (x, c) = (*x, *c);
                self.accumulate(x, go.data().iter().map(|g| g * c));
            }
            Op::AddScalar(x) => {
                let x = *x;
                self.accumulate(x, go.data().iter().copied());
            }
            Op::Neg(x) => {
                let x = *x;
                self.accumulate(x, go.data().iter().map(|g| -g));
            }
            Op::Abs(x) => {
                let x = *x;
                let g: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(g, v)| g * sign(*v))
                    .collect();
                self.accumulate(x, g.into_iter());
            }
            Op::Tanh(x) => {
                let x = *x;
                let g: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(x, g.into_iter());
            }
            Op::Relu(x) => {
                let x = *x;
                let g: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(x, g.into_iter());
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let g: Vec<f64> = go
                    .data()
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(x, g.into_iter());
            }
            Op::Softmax(x) => {
                let x = *x;
                let y = self.nodes[i].value.clone();
                let c = y.last_dim();
                let mut g = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yrow = &y.data()[r * c..(r + 1) * c];
                    let grow = &go.data()[r * c..(r + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for k in 0..c {
                        g[r * c + k] = yrow[k] * (grow[k] - dot);
                    }
                }
                self.accumulate(x, g.into_iter());
            }
            Op::Affine { w, b, x } => {
                let (w, b, x) = (*w, *b, *x);
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (d_in, d_out) = (ws[0], ws[1]);
                let rows = self.nodes[x.0].value.rows();
                let xv = self.nodes[x.0].value.data().to_vec();
                let wv = self.nodes[w.0].value.data().to_vec();
                let mut gw = vec![0.0; d_in * d_out];
                let mut gb = vec![0.0; d_out];
                let mut gx = vec![0.0; rows * d_in];
                for r in 0..rows {
                    let grow = &go.data()[r * d_out..(r + 1) * d_out];
                    let xrow = &xv[r * d_in..(r + 1) * d_in];
                    for (o, &g) in grow.iter().enumerate() {
                        if g != 0.0 {
                            gb[o] += g;
                            for (ii, &xi) in xrow.iter().enumerate() {
                                gw[ii * d_out + o] += xi * g;
                                gx[r * d_in + ii] += wv[ii * d_out + o] * g;
                            }
                        }
                    }
                }
                self.accumulate(w, gw.into_iter());
                self.accumulate(b, gb.into_iter());
                self.accumulate(x, gx.into_iter());
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table.0].value.shape()[1];
                let mut gt = vec![0.0; self.nodes[table.0].value.len()];
                for (k, &id) in ids.iter().enumerate() {
                    let grow = &go.data()[k * d..(k + 1) * d];
                    let trow = &mut gt[id as usize * d..(id as usize + 1) * d];
                    for (t, &g) in trow.iter_mut().zip(grow) {
                        *t += g;
                    }
                }
                self.accumulate(table, gt.into_iter());
            }
            Op::MeanPoolMasked { x, mask, denoms } => {
                let (x, mask) = (*x, *mask);
                let denoms = denoms.clone();
                let out = self.nodes[i].value.clone();
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let xv = self.nodes[x.0].value.data().to_vec();
                let mv = self.nodes[mask.0].value.data().to_vec();
                let mut gx = vec![0.0; b * n * d];
                let mut gm = vec![0.0; b * n];
                for bi in 0..b {
                    let grow = &go.data()[bi * d..(bi + 1) * d];
                    let orow = &out.data()[bi * d..(bi + 1) * d];
                    for ni in 0..n {
                        let m = mv[bi * n + ni];
                        let xoff = (bi * n + ni) * d;
                        let mut dm = 0.0;
                        for di in 0..d {
                            gx[xoff + di] += grow[di] * m / denoms[bi];
                            dm += grow[di] * (xv[xoff + di] - orow[di]);
                        }
                        gm[bi * n + ni] += dm / denoms[bi];
                    }
                }
                self.accumulate(x, gx.into_iter());
                self.accumulate(mask, gm.into_iter());
            }
            Op::SumPoolScaled { x, mask } => {
                let (x, mask) = (*x, *mask);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (b, n, d) = (xs[0], xs[1], xs[2]);
                let scale = 1.0 / n as f64;
                let xv = self.nodes[x.0].value.data().to_vec();
                let mv = self.nodes[mask.0].value.data().to_vec();
                let mut gx = vec![0.0; b * n * d];
                let mut gm = vec![0.0; b * n];
                for bi in 0..b {
                    let grow = &go.data()[bi * d..(bi + 1) * d];
                    for ni in 0..n {
                        let m = mv[bi * n + ni];
                        let xoff = (bi * n + ni) * d;
                        let mut dm = 0.0;
                        for di in 0..d {
                            gx[xoff + di] += grow[di] * m * scale;
                            dm += grow[di] * xv[xoff + di];
                        }
                        gm[bi * n + ni] += dm * scale;
                    }
                }
                self.accumulate(x, gx.into_iter());
                self.accumulate(mask, gm.into_iter());
            }
            Op::ConcatLast(a, b) => {
                let (a, b) = (*a, *b);
                let da = self.nodes[a.0].value.last_dim();
                let db = self.nodes[b.0].value.last_dim();
                let rows = self.nodes[a.0].value.rows();
                let mut ga = vec![0.0; rows * da];
                let mut gb = vec![0.0; rows * db];
                for r in 0..rows {
                    let grow = &go.data()[r * (da + db)..(r + 1) * (da + db)];
                    ga[r * da..(r + 1) * da].copy_from_slice(&grow[..da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&grow[da..]);
                }
                self.accumulate(a, ga.into_iter());
                self.accumulate(b, gb.into_iter());
            }
            Op::ShiftSeq { x, delta } => {
                let (x, delta) = (*x, *delta);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let b = xs[0];
                let n = xs[1];
                let inner: usize = xs[2..].iter().product::<usize>().max(1);
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for bi in 0..b {
                    for t in 0..n as i64 {
                        let src = t - delta;
                        if src >= 0 && src < n as i64 {
                            let dst_off = (bi * n + t as usize) * inner;
                            let src_off = (bi * n + src as usize) * inner;
                            for k in 0..inner {
                                gx[src_off + k] += go.data()[dst_off + k];
                            }
                        }
                    }
                }
                self.accumulate(x, gx.into_iter());
            }
            Op::CausalConvAllOnes { x, len } => {
                let (x, l) = (*x, *len);
                let n = self.nodes[x.0].value.last_dim();
                let rows = self.nodes[x.0].value.rows();
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for r in 0..rows {
                    let grow = &go.data()[r * n..(r + 1) * n];
                    for k in 0..n {
                        let hi = (k + l - 1).min(n - 1);
                        gx[r * n + k] = grow[k..=hi].iter().sum();
                    }
                }
                self.accumulate(x, gx.into_iter());
            }
            Op::TotalVariationSeq(x) => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (b, n) = (xs[0], xs[1]);
                let xv = self.nodes[x.0].value.data().to_vec();
                let mut gx = vec![0.0; b * n];
                for bi in 0..b {
                    let g = go.data()[bi];
                    for ni in 1..n {
                        let s = sign(xv[bi * n + ni] - xv[bi * n + ni - 1]);
                        gx[bi * n + ni] += g * s;
                        gx[bi * n + ni - 1] -= g * s;
                    }
                }
                self.accumulate(x, gx.into_iter());
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len() as f64;
                let g = go.item() / n;
                let len = self.nodes[x.0].value.len();
                self.accumulate(x, std::iter::repeat(g).take(len));
            }
            Op::SumLast(x) => {
                let x = *x;
                let c = self.nodes[x.0].value.last_dim();
                let rows = self.nodes[x.0].value.rows();
                let mut gx = vec![0.0; rows * c];
                for r in 0..rows {
                    let g = go.data()[r];
                    gx[r * c..(r + 1) * c].fill(g);
                }
                self.accumulate(x, gx.into_iter());
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let labels = labels.clone();
                let probs = probs.clone();
                let c = self.nodes[logits.0].value.last_dim();
                let b = labels.len();
                let mut gl = vec![0.0; b * c];
                for bi in 0..b {
                    let g = go.data()[bi];
                    for k in 0..c {
                        let indicator = if k == labels[bi] { 1.0 } else { 0.0 };
                        gl[bi * c + k] = g * (probs[bi * c + k] - indicator);
                    }
                }
                self.accumulate(logits, gl.into_iter());
            }
            Op::StraightThrough { soft } => {
                let soft = *soft;
                self.accumulate(soft, go.data().iter().copied());
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accumulate(x, go.data().iter().copied());
            }
        }
    }

    fn accumulate(&mut self, target: NodeId, grads: impl Iterator<Item = f64>) {
        for (slot, g) in self.nodes[target.0].grad.data_mut().iter_mut().zip(grads) {
            *slot += g;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn causal_conv_spreads_impulse() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[5], &[0.0, 0.0, 1.0, 0.0, 0.0]));
        let y = t.causal_conv_allones(x, 3).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn causal_conv_left_boundary_sums_what_exists() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[4], &[1.0, 1.0, 1.0, 1.0]));
        let y = t.causal_conv_allones(x, 3).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn causal_conv_preserves_mass_for_interior_impulse() {
        // An impulse at least l-1 positions from the right boundary is
        // counted l times in the output.
        let mut t = Tape::new();
        let x = t.leaf(arr(&[8], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
        let l = 4;
        let y = t.causal_conv_allones(x, l).unwrap();
        let total: f64 = t.value(y).data().iter().sum();
        assert_eq!(total, l as f64);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2, 3], &[1.0, -2.0, 0.5, 10.0, 10.0, 10.0]));
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_saturates_to_one_hot_at_large_scale() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1, 3], &[0.0, 1000.0, 0.0]));
        let y = t.softmax(x).unwrap();
        let v = t.value(y).data();
        assert!(v[1] > 1.0 - 1e-12);
        assert!(v[0] < 1e-12 && v[2] < 1e-12);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let mut t = Tape::new();
        let logits = t.leaf(arr(&[2, 2], &[0.3, 0.3, -1.0, -1.0]));
        let ce = t.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        for v in t.value(ce).data() {
            assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let mut t = Tape::new();
        let logits = t.leaf(arr(&[2, 2], &[4.0, -3.0, -2.5, 7.0]));
        let ce = t.softmax_cross_entropy(logits, &[1, 0]).unwrap();
        for v in t.value(ce).data() {
            assert!(*v >= 0.0);
        }
    }

    #[test]
    fn sigmoid_gradient_at_zero_is_quarter() {
        // loss = sum(sigmoid(w * x)) at w = 0 gives grad 0.25 * x.
        let x = [0.7, -1.3, 2.0];
        let mut t = Tape::new();
        let w = t.leaf(arr(&[1, 3], &[0.0, 0.0, 0.0]));
        let xs = t.leaf(arr(&[1, 3], &x));
        let wx = t.elementwise_mul(w, xs).unwrap();
        let s = t.sigmoid(wx);
        let m = t.mean_all(s);
        let loss = t.scale(m, 3.0); // sum = mean * len
        t.backward(loss).unwrap();
        for (g, xi) in t.grad(w).data().iter().zip(&x) {
            assert!((g - 0.25 * xi).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let mut t = Tape::new();
        let used = t.leaf(Array::scalar(2.0));
        let unused = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
        let loss = t.scale(used, 5.0);
        t.backward(loss).unwrap();
        assert!(t.grad(unused).data().iter().all(|&g| g == 0.0));
        assert_eq!(t.grad(used).item(), 5.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(arr(&[2], &[1.0, 2.0]));
        let b = t.leaf(arr(&[3], &[1.0, 2.0, 3.0]));
        let err = t.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "got: {msg}");
    }

    #[test]
    fn straight_through_forward_is_bit_equal_to_hard() {
        let mut t = Tape::new();
        let soft = t.leaf(arr(&[4], &[0.2, 0.9, 0.4, 0.6]));
        let hard = arr(&[4], &[0.0, 1.0, 0.0, 1.0]);
        let st = t.straight_through(hard.clone(), soft).unwrap();
        assert_eq!(t.value(st), &hard);
    }

    #[test]
    fn straight_through_routes_gradient_to_soft() {
        let mut t = Tape::new();
        let soft = t.leaf(arr(&[3], &[0.1, 0.5, 0.9]));
        let scaled = t.scale(soft, 2.0);
        let hard = arr(&[3], &[0.0, 1.0, 1.0]);
        let st = t.straight_through(hard, scaled).unwrap();
        let loss = t.mean_all(st);
        t.backward(loss).unwrap();
        // d loss / d soft = 2/3 per element, as if the output were `scaled`
        for g in t.grad(soft).data() {
            assert!((g - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_through_equal_to_soft_behaves_as_identity() {
        let vals = arr(&[3], &[0.25, 0.5, 0.75]);
        let mut t = Tape::new();
        let soft = t.leaf(vals.clone());
        let st = t.straight_through(vals.clone(), soft).unwrap();
        let loss = t.mean_all(st);
        t.backward(loss).unwrap();
        let st_grads = t.grad(soft).data().to_vec();

        let mut t2 = Tape::new();
        let soft2 = t2.leaf(vals);
        let loss2 = t2.mean_all(soft2);
        t2.backward(loss2).unwrap();
        assert_eq!(st_grads, t2.grad(soft2).data());
    }

    #[test]
    fn embed_looks_up_rows() {
        let mut t = Tape::new();
        let table = t.leaf(arr(&[3, 2], &[0.0, 0.1, 1.0, 1.1, 2.0, 2.1]));
        let e = t.embed(table, &[2, 0, 1], &[1, 3]).unwrap();
        assert_eq!(t.value(e).shape(), &[1, 3, 2]);
        assert_eq!(t.value(e).data(), &[2.0, 2.1, 0.0, 0.1, 1.0, 1.1]);
    }

    #[test]
    fn embed_accumulates_gradients_for_repeated_ids() {
        let mut t = Tape::new();
        let table = t.leaf(arr(&[2, 1], &[0.0, 0.0]));
        let e = t.embed(table, &[1, 1, 0], &[1, 3]).unwrap();
        let s = t.mean_all(e);
        t.backward(s).unwrap();
        let g = t.grad(table).data();
        assert!((g[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_pool_all_zero_mask_pools_to_zero() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = t.leaf(arr(&[1, 2], &[0.0, 0.0]));
        let p = t.mean_pool_masked(x, m).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shift_seq_moves_and_zero_fills() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1, 3, 1], &[1.0, 2.0, 3.0]));
        let fwd = t.shift_seq(x, 1).unwrap();
        assert_eq!(t.value(fwd).data(), &[0.0, 1.0, 2.0]);
        let back = t.shift_seq(x, -1).unwrap();
        assert_eq!(t.value(back).data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn total_variation_counts_boundaries() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[1, 5], &[0.0, 1.0, 1.0, 0.0, 1.0]));
        let tv = t.total_variation_seq(x).unwrap();
        assert_eq!(t.value(tv).data(), &[3.0]);
    }
}
