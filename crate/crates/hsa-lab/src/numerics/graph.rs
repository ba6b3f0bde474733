//! Reverse-mode tape. Every operation computes its value eagerly and
//! records enough context for an exact backward pass; no fusion beyond the
//! single windowed-attention node, which exists so that long sequences do
//! not materialize full score matrices.
//!
//! Graphs built in inference mode skip backward bookkeeping and allow
//! freeing intermediate buffers, which keeps long-context evaluation inside
//! a few hundred MB.

use super::element::Element;
use super::params::{ParamId, ParamSet};
use super::tensor::Tensor;
use crate::error::{HsaError, Result};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Precomputed rotary tables. Rotation is applied pairwise to dimensions
/// (2i, 2i+1) with angle `pos / base^(2i/dim)`; it preserves the norm of
/// every pair.
#[derive(Debug, Clone)]
pub struct RopeTable<F: Element> {
    pub dim: usize,
    pub base: f64,
    max_pos: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

impl<F: Element> RopeTable<F> {
    pub fn new(dim: usize, base: f64, max_pos: usize) -> Self {
        assert!(dim % 2 == 0, "rope dim must be even");
        let half = dim / 2;
        let mut cos = Vec::with_capacity(max_pos * half);
        let mut sin = Vec::with_capacity(max_pos * half);
        for pos in 0..max_pos {
            for i in 0..half {
                let theta = pos as f64 / base.powf(2.0 * i as f64 / dim as f64);
                cos.push(F::from_f64(theta.cos()));
                sin.push(F::from_f64(theta.sin()));
            }
        }
        Self { dim, base, max_pos, cos, sin }
    }

    pub fn max_pos(&self) -> usize {
        self.max_pos
    }

    #[inline]
    fn angles(&self, pos: usize) -> (&[F], &[F]) {
        let half = self.dim / 2;
        (&self.cos[pos * half..(pos + 1) * half], &self.sin[pos * half..(pos + 1) * half])
    }

    /// Rotate one row in place; `inverse` applies the opposite angle.
    fn rotate_row(&self, row: &mut [F], pos: usize, inverse: bool) {
        let (cos, sin) = self.angles(pos);
        for i in 0..self.dim / 2 {
            let (c, mut s) = (cos[i], sin[i]);
            if inverse {
                s = -s;
            }
            let (x, y) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x * c - y * s;
            row[2 * i + 1] = x * s + y * c;
        }
    }
}

/// Ragged per-row buffer used by the windowed-attention node to retain
/// softmax probabilities for backward.
#[derive(Debug, Clone)]
struct Ragged<F> {
    offsets: Vec<usize>,
    data: Vec<F>,
}

#[derive(Debug)]
enum Op<F: Element> {
    Leaf { param: Option<ParamId> },
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBroadcastRow { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: F },
    Silu { a: NodeId },
    Softmax { a: NodeId, axis: usize },
    SelectedSoftmax { scores: NodeId, selection: Arc<Vec<Vec<u32>>> },
    RmsNorm { a: NodeId, gain: NodeId, eps: F },
    GatherRows { a: NodeId, idx: Arc<Vec<u32>> },
    GatherElems { a: NodeId, idx: Arc<Vec<(u32, u32)>> },
    ScatterAddRows { a: NodeId, idx: Arc<Vec<u32>>, #[allow(dead_code)] rows: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    MulColBroadcast { a: NodeId, col: NodeId },
    Rope { a: NodeId, positions: Arc<Vec<usize>>, table: Arc<RopeTable<F>> },
    WindowedAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        window: usize,
        scale: F,
        probs: Option<Ragged<F>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Arc<Vec<u32>>,
        mask: Arc<Vec<bool>>,
        probs: Option<Tensor<F>>,
    },
}

#[derive(Debug)]
enum Val<F: Element> {
    Owned(Tensor<F>),
    Shared(Arc<Tensor<F>>),
    Freed,
}

#[derive(Debug)]
struct Node<F: Element> {
    value: Val<F>,
    shape: Vec<usize>,
    op: Op<F>,
    needs_grad: bool,
    grad: Option<Vec<F>>,
}

pub struct Graph<F: Element> {
    nodes: Vec<Node<F>>,
    recording: bool,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// Graph that never runs backward: fused nodes skip probability
    /// retention and intermediate values may be freed.
    pub fn new_inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id the next node will get; used with `free_values` to bracket blocks.
    pub fn watermark(&self) -> NodeId {
        NodeId(self.nodes.len())
    }

    fn push(&mut self, value: Val<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        let shape = match &value {
            Val::Owned(t) => t.shape().to_vec(),
            Val::Shared(t) => t.shape().to_vec(),
            Val::Freed => unreachable!(),
        };
        self.nodes.push(Node { value, shape, op, needs_grad: needs_grad && self.recording, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        match &self.nodes[id.0].value {
            Val::Owned(t) => t,
            Val::Shared(t) => t,
            Val::Freed => panic!("node value was freed"),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last backward pass w.r.t. this node, if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<F>> {
        self.nodes[id.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    /// Drop value buffers of nodes in `[from, len)` except those listed.
    /// Only legal on inference graphs.
    pub fn free_values(&mut self, from: NodeId, keep: &[NodeId]) {
        assert!(!self.recording, "free_values requires an inference graph");
        for i in from.0..self.nodes.len() {
            if keep.iter().any(|k| k.0 == i) {
                continue;
            }
            self.nodes[i].value = Val::Freed;
        }
    }

    // ---- leaves ----

    /// Constant input (no gradient).
    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Val::Owned(t), Op::Leaf { param: None }, false)
    }

    /// Non-differentiable input shared with the caller; never copied.
    pub fn leaf_shared(&mut self, t: Arc<Tensor<F>>) -> NodeId {
        self.push(Val::Shared(t), Op::Leaf { param: None }, false)
    }

    /// Differentiable input that is not a registered parameter.
    pub fn var(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Val::Owned(t), Op::Leaf { param: None }, true)
    }

    /// Registered parameter; the tensor is shared, never copied.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> NodeId {
        self.push(Val::Shared(Arc::clone(params.value(id))), Op::Leaf { param: Some(id) }, true)
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(self.value(a));
        let (kb, n) = dims2(self.value(b));
        if ka != kb {
            return Err(HsaError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m, ka, n,
            F::one(),
            self.value(a).data(), ka as isize, 1,
            self.value(b).data(), n as isize, 1,
            F::zero(),
            &mut out, n as isize, 1,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![m, n], out)?),
            Op::Matmul { a, b },
            needs,
        ))
    }

    /// `a @ b^T` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(self.value(a));
        let (n, kb) = dims2(self.value(b));
        if ka != kb {
            return Err(HsaError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m, ka, n,
            F::one(),
            self.value(a).data(), ka as isize, 1,
            self.value(b).data(), 1, kb as isize,
            F::zero(),
            &mut out, n as isize, 1,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![m, n], out)?),
            Op::MatmulNT { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(HsaError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Val::Owned(t), Op::Add { a, b }, needs))
    }

    /// Row-broadcast bias add: `a: [r,c] + bias: [c]`.
    pub fn add_broadcast_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(self.value(a));
        if self.value(bias).numel() != c {
            return Err(HsaError::ShapeMismatch {
                op: "add_broadcast_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let bv = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] + bv[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, c], data)?),
            Op::AddBroadcastRow { a, bias },
            needs,
        ))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(HsaError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Val::Owned(t), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let t = self.value(a).map(|x| x * c);
        let needs = self.needs(a);
        self.push(Val::Owned(t), Op::Scale { a, c }, needs)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|x| x * sigmoid(x));
        let needs = self.needs(a);
        self.push(Val::Owned(t), Op::Silu { a }, needs)
    }

    /// Numerically stable softmax along `axis`. Rejects NaN input.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        if axis >= t.shape().len() {
            return Err(HsaError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", t.shape()),
            });
        }
        if t.has_nan() {
            return Err(HsaError::Numeric("softmax: NaN in input".into()));
        }
        let mut out = t.data().to_vec();
        for_each_lane(t.shape(), axis, |lane| {
            softmax_lane_inplace(&mut out, &lane);
        });
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(a);
        Ok(self.push(Val::Owned(t), Op::Softmax { a, axis }, needs))
    }

    /// Per-row softmax restricted to a selected column subset; unselected
    /// entries are exactly zero, empty selections yield an all-zero row.
    pub fn selected_softmax(
        &mut self,
        scores: NodeId,
        selection: Arc<Vec<Vec<u32>>>,
    ) -> Result<NodeId> {
        let (r, c) = dims2(self.value(scores));
        if selection.len() != r {
            return Err(HsaError::InvalidArgument {
                op: "selected_softmax",
                msg: format!("{} selection rows for {} score rows", selection.len(), r),
            });
        }
        let s = self.value(scores).data();
        let mut out = vec![F::zero(); r * c];
        for (i, sel) in selection.iter().enumerate() {
            if sel.is_empty() {
                continue;
            }
            let mut mx = F::neg_infinity();
            for &j in sel.iter() {
                mx = mx.max(s[i * c + j as usize]);
            }
            let mut denom = F::zero();
            for &j in sel.iter() {
                let e = (s[i * c + j as usize] - mx).exp();
                out[i * c + j as usize] = e;
                denom = denom + e;
            }
            for &j in sel.iter() {
                out[i * c + j as usize] = out[i * c + j as usize] / denom;
            }
        }
        let needs = self.needs(scores);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, c], out)?),
            Op::SelectedSoftmax { scores, selection },
            needs,
        ))
    }

    /// RMS normalization over the last axis with a learned per-channel gain.
    pub fn rms_norm(&mut self, a: NodeId, gain: NodeId, eps: F) -> Result<NodeId> {
        let t = self.value(a);
        let last = *t.shape().last().ok_or_else(|| HsaError::InvalidArgument {
            op: "rms_norm",
            msg: "rank-0 input".into(),
        })?;
        if self.value(gain).numel() != last {
            return Err(HsaError::ShapeMismatch {
                op: "rms_norm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let g = self.value(gain).data();
        let x = t.data();
        let mut out = vec![F::zero(); x.len()];
        let lanes = x.len() / last;
        for lane in 0..lanes {
            let xs = &x[lane * last..(lane + 1) * last];
            let ms = xs.iter().map(|&v| v * v).sum::<F>() / F::from_f64(last as f64);
            let r = (ms + eps).sqrt();
            for j in 0..last {
                out[lane * last + j] = xs[j] / r * g[j];
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(gain);
        Ok(self.push(Val::Owned(t), Op::RmsNorm { a, gain, eps }, needs))
    }

    /// Row gather along axis 0; also serves as embedding lookup.
    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= r) {
            return Err(HsaError::InvalidArgument {
                op: "gather_rows",
                msg: format!("row index {bad} out of range 0..{r}"),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(t.row(i as usize));
        }
        let t = Tensor::new(vec![idx.len(), c], out)?;
        let needs = self.needs(a);
        Ok(self.push(Val::Owned(t), Op::GatherRows { a, idx }, needs))
    }

    /// Embedding lookup: rows of `weight` selected by token id.
    pub fn embedding(&mut self, weight: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.gather_rows(weight, Arc::new(ids.to_vec()))
    }

    /// Gather scalar entries `(row, col)` into a `[m, 1]` column.
    pub fn gather_elems(&mut self, a: NodeId, idx: Arc<Vec<(u32, u32)>>) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        let mut out = Vec::with_capacity(idx.len());
        for &(i, j) in idx.iter() {
            if i as usize >= r || j as usize >= c {
                return Err(HsaError::InvalidArgument {
                    op: "gather_elems",
                    msg: format!("index ({i},{j}) out of range ({r},{c})"),
                });
            }
            out.push(t.data()[i as usize * c + j as usize]);
        }
        let n = idx.len();
        let needs = self.needs(a);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![n, 1], out)?),
            Op::GatherElems { a, idx },
            needs,
        ))
    }

    /// Scatter-add rows of `a` into a zero `[rows, cols]` output at `idx`.
    pub fn scatter_add_rows(&mut self, a: NodeId, idx: Arc<Vec<u32>>, rows: usize) -> Result<NodeId> {
        let t = self.value(a);
        let c = t.cols();
        if idx.len() != t.rows() {
            return Err(HsaError::InvalidArgument {
                op: "scatter_add_rows",
                msg: format!("{} indices for {} rows", idx.len(), t.rows()),
            });
        }
        let mut out = vec![F::zero(); rows * c];
        for (j, &i) in idx.iter().enumerate() {
            debug_assert!((i as usize) < rows);
            let dst = &mut out[i as usize * c..(i as usize + 1) * c];
            for (d, &s) in dst.iter_mut().zip(t.row(j)) {
                *d = *d + s;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![rows, c], out)?),
            Op::ScatterAddRows { a, idx, rows },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        if start + len > c {
            return Err(HsaError::InvalidArgument {
                op: "slice_cols",
                msg: format!("cols {start}..{} out of range 0..{c}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, len], out)?),
            Op::SliceCols { a, start },
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HsaError::InvalidArgument { op: "concat_rows", msg: "no parts".into() });
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(HsaError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Val::Owned(Tensor::new(vec![rows, c], out)?),
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(HsaError::InvalidArgument { op: "concat_cols", msg: "no parts".into() });
        }
        let r = self.value(parts[0]).rows();
        let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(HsaError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, total_c], out)?),
            Op::ConcatCols { parts: parts.to_vec() },
            needs,
        ))
    }

    /// Multiply each row `i` of `a` by scalar `col[i]`.
    pub fn mul_col_broadcast(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (r, c) = dims2(self.value(a));
        if self.value(col).numel() != r {
            return Err(HsaError::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(col).to_vec(),
            });
        }
        let cv = self.value(col).data();
        let av = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] * cv[i];
            }
        }
        let needs = self.needs(a) || self.needs(col);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, c], out)?),
            Op::MulColBroadcast { a, col },
            needs,
        ))
    }

    /// Apply rotary embedding to each row at its absolute position.
    pub fn rope(
        &mut self,
        a: NodeId,
        positions: Arc<Vec<usize>>,
        table: Arc<RopeTable<F>>,
    ) -> Result<NodeId> {
        let t = self.value(a);
        let (r, c) = dims2(t);
        if c != table.dim {
            return Err(HsaError::ShapeMismatch {
                op: "rope",
                lhs: t.shape().to_vec(),
                rhs: vec![table.dim],
            });
        }
        if positions.len() != r {
            return Err(HsaError::InvalidArgument {
                op: "rope",
                msg: format!("{} positions for {r} rows", positions.len()),
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= table.max_pos) {
            return Err(HsaError::InvalidArgument {
                op: "rope",
                msg: format!("position {p} exceeds table max {}", table.max_pos),
            });
        }
        let mut out = t.data().to_vec();
        for (i, &pos) in positions.iter().enumerate() {
            table.rotate_row(&mut out[i * c..(i + 1) * c], pos, false);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![r, c], out)?),
            Op::Rope { a, positions, table },
            needs,
        ))
    }

    /// Fused single-head causal sliding-window attention. Token `t` attends
    /// to positions `max(0, t-window+1)..=t`; scores are `q·k * scale`.
    pub fn windowed_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        window: usize,
        scale: F,
    ) -> Result<NodeId> {
        let (n, d) = dims2(self.value(q));
        if dims2(self.value(k)) != (n, d) || dims2(self.value(v)).0 != n {
            return Err(HsaError::ShapeMismatch {
                op: "windowed_attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if window == 0 {
            return Err(HsaError::InvalidArgument {
                op: "windowed_attention",
                msg: "window must be >= 1".into(),
            });
        }
        let dv = dims2(self.value(v)).1;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![F::zero(); n * dv];
        let mut offsets = Vec::with_capacity(n + 1);
        let mut probs: Vec<F> = Vec::new();
        offsets.push(0);
        let mut scores: Vec<F> = Vec::with_capacity(window);
        for t in 0..n {
            let lo = t + 1 - window.min(t + 1);
            scores.clear();
            let qt = &qv[t * d..(t + 1) * d];
            for j in lo..=t {
                let kj = &kv[j * d..(j + 1) * d];
                let mut s = F::zero();
                for e in 0..d {
                    s = s + qt[e] * kj[e];
                }
                scores.push(s * scale);
            }
            softmax_slice_inplace(&mut scores);
            for (w, j) in (lo..=t).enumerate() {
                let p = scores[w];
                let vj = &vv[j * dv..(j + 1) * dv];
                let ot = &mut out[t * dv..(t + 1) * dv];
                for e in 0..dv {
                    ot[e] = ot[e] + p * vj[e];
                }
            }
            if self.recording {
                probs.extend_from_slice(&scores);
            }
            offsets.push(probs.len());
        }
        let saved = if self.recording { Some(Ragged { offsets, data: probs }) } else { None };
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            Val::Owned(Tensor::new(vec![n, dv], out)?),
            Op::WindowedAttention { q, k, v, window, scale, probs: saved },
            needs,
        ))
    }

    /// Mean negative log-likelihood over masked positions.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<NodeId> {
        let (n, v) = dims2(self.value(logits));
        if targets.len() != n || mask.len() != n {
            return Err(HsaError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{n} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
            return Err(HsaError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {t} outside vocabulary {v}"),
            });
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(HsaError::InvalidArgument {
                op: "cross_entropy",
                msg: "empty loss mask".into(),
            });
        }
        let x = self.value(logits).data();
        let mut probs = if self.recording { Some(vec![F::zero(); n * v]) } else { None };
        let mut total = F::zero();
        for i in 0..n {
            if !mask[i] && probs.is_none() {
                continue;
            }
            let row = &x[i * v..(i + 1) * v];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut denom = F::zero();
            for &z in row {
                denom = denom + (z - mx).exp();
            }
            let lse = denom.ln() + mx;
            if mask[i] {
                total = total + lse - row[targets[i] as usize];
            }
            if let Some(p) = probs.as_mut() {
                for j in 0..v {
                    p[i * v + j] = (row[j] - mx).exp() / denom;
                }
            }
        }
        let loss = total / F::from_f64(m as f64);
        let probs = match probs {
            Some(p) => Some(Tensor::new(vec![n, v], p)?),
            None => None,
        };
        let needs = self.needs(logits);
        Ok(self.push(
            Val::Owned(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(mask.to_vec()),
                probs,
            },
            needs,
        ))
    }

    // ---- backward ----

    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        self.backward_seeded(out, F::one())
    }

    /// Reverse sweep seeding `d(out)` with `seed`; `out` must be scalar.
    pub fn backward_seeded(&mut self, out: NodeId, seed: F) -> Result<()> {
        if !self.recording {
            return Err(HsaError::InvalidArgument {
                op: "backward",
                msg: "inference graph cannot run backward".into(),
            });
        }
        if self.value(out).numel() != 1 {
            return Err(HsaError::InvalidArgument {
                op: "backward",
                msg: format!("backward root must be scalar, got {:?}", self.shape(out)),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![seed]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Fold parameter-leaf gradients into the registry (sums across graphs).
    pub fn accumulate_param_grads(&self, params: &mut ParamSet<F>) {
        for node in &self.nodes {
            if let (Op::Leaf { param: Some(pid) }, Some(g)) = (&node.op, &node.grad) {
                let dst = params.grad_mut(*pid).data_mut();
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let ensure = |grads: &mut [Option<Vec<F>>], id: NodeId, numel: usize| {
            grads[id.0].get_or_insert_with(|| vec![F::zero(); numel]);
        };
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).1;
                if self.needs(*a) {
                    ensure(grads, *a, m * k);
                    let da = grads[a.0].as_mut().unwrap();
                    // dA += dC @ B^T
                    F::gemm(
                        m, n, k,
                        F::one(),
                        g, n as isize, 1,
                        self.value(*b).data(), 1, n as isize,
                        F::one(),
                        da, k as isize, 1,
                    );
                }
                if self.needs(*b) {
                    ensure(grads, *b, k * n);
                    let db = grads[b.0].as_mut().unwrap();
                    // dB += A^T @ dC
                    F::gemm(
                        k, m, n,
                        F::one(),
                        self.value(*a).data(), 1, k as isize,
                        g, n as isize, 1,
                        F::one(),
                        db, n as isize, 1,
                    );
                }
            }
            Op::MatmulNT { a, b } => {
                let (m, k) = dims2(self.value(*a));
                let n = dims2(self.value(*b)).0;
                if self.needs(*a) {
                    ensure(grads, *a, m * k);
                    let da = grads[a.0].as_mut().unwrap();
                    // dA += dC @ B
                    F::gemm(
                        m, n, k,
                        F::one(),
                        g, n as isize, 1,
                        self.value(*b).data(), k as isize, 1,
                        F::one(),
                        da, k as isize, 1,
                    );
                }
                if self.needs(*b) {
                    ensure(grads, *b, n * k);
                    let db = grads[b.0].as_mut().unwrap();
                    // dB += dC^T @ A
                    F::gemm(
                        n, m, k,
                        F::one(),
                        g, 1, n as isize,
                        self.value(*a).data(), k as isize, 1,
                        F::one(),
                        db, k as isize, 1,
                    );
                }
            }
            Op::Add { a, b } => {
                for &x in [a, b].iter() {
                    if self.needs(*x) {
                        ensure(grads, *x, g.len());
                        add_into(grads[x.0].as_mut().unwrap(), g);
                    }
                }
            }
            Op::AddBroadcastRow { a, bias } => {
                let c = self.value(*bias).numel();
                if self.needs(*a) {
                    ensure(grads, *a, g.len());
                    add_into(grads[a.0].as_mut().unwrap(), g);
                }
                if self.needs(*bias) {
                    ensure(grads, *bias, c);
                    let db = grads[bias.0].as_mut().unwrap();
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] = db[i % c] + gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    ensure(grads, *a, g.len());
                    let bv = self.value(*b).data();
                    let da = grads[a.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    ensure(grads, *b, g.len());
                    let av = self.value(*a).data();
                    let db = grads[b.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        db[j] = db[j] + g[j] * av[j];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    ensure(grads, *a, g.len());
                    let da = grads[a.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        da[j] = da[j] + g[j] * *c;
                    }
                }
            }
            Op::Silu { a } => {
                if self.needs(*a) {
                    ensure(grads, *a, g.len());
                    let x = self.value(*a).data();
                    let da = grads[a.0].as_mut().unwrap();
                    for j in 0..g.len() {
                        let s = sigmoid(x[j]);
                        da[j] = da[j] + g[j] * s * (F::one() + x[j] * (F::one() - s));
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(*a) {
                    let y = self.value_of(i);
                    ensure(grads, *a, g.len());
                    let da = grads[a.0].as_mut().unwrap();
                    for_each_lane(&self.nodes[i].shape, *axis, |lane| {
                        let mut dot = F::zero();
                        for l in lane.iter() {
                            dot = dot + y[l] * g[l];
                        }
                        for l in lane.iter() {
                            da[l] = da[l] + y[l] * (g[l] - dot);
                        }
                    });
                }
            }
            Op::SelectedSoftmax { scores, selection } => {
                if self.needs(*scores) {
                    let y = self.value_of(i);
                    let c = dims2(self.value(*scores)).1;
                    ensure(grads, *scores, y.len());
                    let ds = grads[scores.0].as_mut().unwrap();
                    for (r, sel) in selection.iter().enumerate() {
                        if sel.is_empty() {
                            continue;
                        }
                        let mut dot = F::zero();
                        for &j in sel.iter() {
                            let l = r * c + j as usize;
                            dot = dot + y[l] * g[l];
                        }
                        for &j in sel.iter() {
                            let l = r * c + j as usize;
                            ds[l] = ds[l] + y[l] * (g[l] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { a, gain, eps } => {
                let x = self.value(*a).data();
                let gv = self.value(*gain).data();
                let last = gv.len();
                let lanes = x.len() / last;
                let inv_last = F::from_f64(1.0 / last as f64);
                if self.needs(*a) {
                    ensure(grads, *a, x.len());
                }
                if self.needs(*gain) {
                    ensure(grads, *gain, last);
                }
                for lane in 0..lanes {
                    let xs = &x[lane * last..(lane + 1) * last];
                    let gs = &g[lane * last..(lane + 1) * last];
                    let ms = xs.iter().map(|&v| v * v).sum::<F>() * inv_last;
                    let r = (ms + *eps).sqrt();
                    if self.needs(*a) {
                        let mut dot = F::zero();
                        for j in 0..last {
                            dot = dot + gs[j] * gv[j] * xs[j];
                        }
                        let r3 = r * r * r;
                        let da = grads[a.0].as_mut().unwrap();
                        for j in 0..last {
                            da[lane * last + j] = da[lane * last + j]
                                + gs[j] * gv[j] / r
                                - xs[j] * dot * inv_last / r3;
                        }
                    }
                    if self.needs(*gain) {
                        let dg = grads[gain.0].as_mut().unwrap();
                        for j in 0..last {
                            dg[j] = dg[j] + gs[j] * xs[j] / r;
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let c = t.cols();
                    ensure(grads, *a, t.numel());
                    let da = grads[a.0].as_mut().unwrap();
                    for (j, &i) in idx.iter().enumerate() {
                        let dst = &mut da[i as usize * c..(i as usize + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(&g[j * c..(j + 1) * c]) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::GatherElems { a, idx } => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let c = dims2(t).1;
                    ensure(grads, *a, t.numel());
                    let da = grads[a.0].as_mut().unwrap();
                    for (j, &(r, cc)) in idx.iter().enumerate() {
                        let l = r as usize * c + cc as usize;
                        da[l] = da[l] + g[j];
                    }
                }
            }
            Op::ScatterAddRows { a, idx, .. } => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let c = t.cols();
                    ensure(grads, *a, t.numel());
                    let da = grads[a.0].as_mut().unwrap();
                    for (j, &i) in idx.iter().enumerate() {
                        let src = &g[i as usize * c..(i as usize + 1) * c];
                        for (d, &s) in da[j * c..(j + 1) * c].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.needs(*a) {
                    let t = self.value(*a);
                    let (r, c) = dims2(t);
                    let len = self.nodes[i].shape[1];
                    ensure(grads, *a, t.numel());
                    let da = grads[a.0].as_mut().unwrap();
                    for row in 0..r {
                        for j in 0..len {
                            let l = row * c + start + j;
                            da[l] = da[l] + g[row * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    if self.needs(p) {
                        ensure(grads, p, numel);
                        add_into(grads[p.0].as_mut().unwrap(), &g[off..off + numel]);
                    }
                    off += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.value(parts[0]).rows();
                let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        ensure(grads, p, r * c);
                        let dp = grads[p.0].as_mut().unwrap();
                        for row in 0..r {
                            for j in 0..c {
                                dp[row * c + j] = dp[row * c + j] + g[row * total_c + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::MulColBroadcast { a, col } => {
                let (r, c) = dims2(self.value(*a));
                if self.needs(*a) {
                    ensure(grads, *a, r * c);
                    let cv = self.value(*col).data();
                    let da = grads[a.0].as_mut().unwrap();
                    for row in 0..r {
                        for j in 0..c {
                            da[row * c + j] = da[row * c + j] + g[row * c + j] * cv[row];
                        }
                    }
                }
                if self.needs(*col) {
                    ensure(grads, *col, r);
                    let av = self.value(*a).data();
                    let dc = grads[col.0].as_mut().unwrap();
                    for row in 0..r {
                        let mut s = F::zero();
                        for j in 0..c {
                            s = s + g[row * c + j] * av[row * c + j];
                        }
                        dc[row] = dc[row] + s;
                    }
                }
            }
            Op::Rope { a, positions, table } => {
                if self.needs(*a) {
                    let c = table.dim;
                    ensure(grads, *a, g.len());
                    let da = grads[a.0].as_mut().unwrap();
                    let mut row = vec![F::zero(); c];
                    for (r, &pos) in positions.iter().enumerate() {
                        row.copy_from_slice(&g[r * c..(r + 1) * c]);
                        table.rotate_row(&mut row, pos, true);
                        for j in 0..c {
                            da[r * c + j] = da[r * c + j] + row[j];
                        }
                    }
                }
            }
            Op::WindowedAttention { q, k, v, window, scale, probs } => {
                let probs = probs.as_ref().expect("recording graph retains attention probs");
                let (n, d) = dims2(self.value(*q));
                let dv = dims2(self.value(*v)).1;
                let (qv, kv, vv) =
                    (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let nq = self.needs(*q);
                let nk = self.needs(*k);
                let nv = self.needs(*v);
                if nq {
                    ensure(grads, *q, n * d);
                }
                if nk {
                    ensure(grads, *k, n * d);
                }
                if nv {
                    ensure(grads, *v, n * dv);
                }
                let mut dscore: Vec<F> = Vec::with_capacity(*window);
                for t in 0..n {
                    let lo = t + 1 - (*window).min(t + 1);
                    let p = &probs.data[probs.offsets[t]..probs.offsets[t + 1]];
                    let gt = &g[t * dv..(t + 1) * dv];
                    // dP_tj = g_t . v_j ; dS = p * (dP - sum(p*dP))
                    dscore.clear();
                    let mut dot = F::zero();
                    for (w, j) in (lo..=t).enumerate() {
                        let vj = &vv[j * dv..(j + 1) * dv];
                        let mut dp = F::zero();
                        for e in 0..dv {
                            dp = dp + gt[e] * vj[e];
                        }
                        dscore.push(dp);
                        dot = dot + p[w] * dp;
                    }
                    for (w, j) in (lo..=t).enumerate() {
                        let ds = p[w] * (dscore[w] - dot) * *scale;
                        if nq {
                            let kj = &kv[j * d..(j + 1) * d];
                            let dq = grads[q.0].as_mut().unwrap();
                            for e in 0..d {
                                dq[t * d + e] = dq[t * d + e] + ds * kj[e];
                            }
                        }
                        if nk {
                            let qt = &qv[t * d..(t + 1) * d];
                            let dk = grads[k.0].as_mut().unwrap();
                            for e in 0..d {
                                dk[j * d + e] = dk[j * d + e] + ds * qt[e];
                            }
                        }
                        if nv {
                            let dvg = grads[v.0].as_mut().unwrap();
                            for e in 0..dv {
                                dvg[j * dv + e] = dvg[j * dv + e] + p[w] * gt[e];
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                if self.needs(*logits) {
                    let p = probs.as_ref().expect("recording graph retains CE probs");
                    let (n, v) = dims2(self.value(*logits));
                    let m = mask.iter().filter(|&&b| b).count();
                    let gy = g[0] / F::from_f64(m as f64);
                    ensure(grads, *logits, n * v);
                    let dl = grads[logits.0].as_mut().unwrap();
                    for r in 0..n {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            let mut d = p.data()[r * v + j];
                            if j == targets[r] as usize {
                                d = d - F::one();
                            }
                            dl[r * v + j] = dl[r * v + j] + gy * d;
                        }
                    }
                }
            }
        }
    }

    fn value_of(&self, i: usize) -> &[F] {
        match &self.nodes[i].value {
            Val::Owned(t) => t.data(),
            Val::Shared(t) => t.data(),
            Val::Freed => panic!("node value was freed"),
        }
    }
}

#[inline]
fn dims2<F: Element>(t: &Tensor<F>) -> (usize, usize) {
    (t.rows(), t.cols())
}

#[inline]
fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn add_into<F: Element>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// One strided lane of an ND tensor along a given axis.
#[derive(Clone)]
pub(crate) struct Lane {
    start: usize,
    len: usize,
    stride: usize,
}

impl Lane {
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).map(move |j| self.start + j * self.stride)
    }
}

/// Visit every lane along `axis` of a tensor with the given shape.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(Lane)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(Lane { start: o * len * inner + i, len, stride: inner });
        }
    }
}

/// In-place stable softmax over one strided lane.
fn softmax_lane_inplace<F: Element>(data: &mut [F], lane: &Lane) {
    let mut mx = F::neg_infinity();
    for i in lane.iter() {
        mx = mx.max(data[i]);
    }
    let mut denom = F::zero();
    for i in lane.iter() {
        let e = (data[i] - mx).exp();
        data[i] = e;
        denom = denom + e;
    }
    for i in lane.iter() {
        data[i] = data[i] / denom;
    }
}

/// In-place stable softmax over a contiguous slice.
fn softmax_slice_inplace<F: Element>(data: &mut [F]) {
    let mx = data.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let mut denom = F::zero();
    for x in data.iter_mut() {
        let e = (*x - mx).exp();
        *x = e;
        denom = denom + e;
    }
    for x in data.iter_mut() {
        *x = *x / denom;
    }
}
