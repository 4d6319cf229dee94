//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The tape is rebuilt for every forward pass. Nodes are appended in
//! topological order, so the backward sweep is a single reverse walk.
//! A node may carry a gradient-scale hook which multiplies the node's
//! finalized gradient before it propagates to its parents; this is the
//! mechanism behind backward-pass soft-masking.

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient encountered in op `{0}`")]
    NonFiniteGradient(&'static str),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("gradient-scale hook already attached to node {0}")]
    HookAlreadyAttached(NodeId),
    #[error("hook scale must be finite and in [0,1], got {0}")]
    InvalidHookScale(f64),
    #[error("hook scale of length {scale_len} does not broadcast to node of length {node_len}")]
    HookBroadcast { scale_len: usize, node_len: usize },
}

/// How a hook's scale vector maps onto the node's elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookBroadcast {
    /// scale.len() == node element count
    Elementwise,
    /// scale.len() == number of columns; repeated across rows
    PerColumn,
}

#[derive(Debug, Clone)]
pub struct GradScaleHook {
    pub scale: Vec<f64>,
    pub broadcast: HookBroadcast,
}

impl GradScaleHook {
    pub fn elementwise(scale: Vec<f64>) -> Self {
        GradScaleHook { scale, broadcast: HookBroadcast::Elementwise }
    }

    pub fn per_column(scale: Vec<f64>) -> Self {
        GradScaleHook { scale, broadcast: HookBroadcast::PerColumn }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// A [m,k] * B [k,n]
    MatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// A [m,k] * B^T, B [n,k]
    MatMulNT { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Add { a: NodeId, b: NodeId },
    /// a [r,c] + bias [c]
    AddBroadcastRow { a: NodeId, b: NodeId, cols: usize },
    /// elementwise a + const mask (not differentiated w.r.t. mask)
    AddConst { a: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// a [r,c] * g [c] broadcast over rows
    MulBroadcastRow { a: NodeId, g: NodeId, cols: usize },
    /// elementwise a * const mask (dropout)
    MulConst { a: NodeId, mask: Vec<f64> },
    Scale { a: NodeId, c: f64 },
    Tanh { a: NodeId },
    Gelu { a: NodeId },
    Log { a: NodeId },
    Exp { a: NodeId },
    Sqrt { a: NodeId },
    /// softmax over rows of length `cols`
    Softmax { a: NodeId, rows: usize, cols: usize },
    LogSoftmax { a: NodeId, rows: usize, cols: usize },
    /// per-row layer norm; gamma/beta are [cols]
    LayerNorm { a: NodeId, gamma: NodeId, beta: NodeId, rows: usize, cols: usize, inv_std: Vec<f64>, xhat: Vec<f64> },
    /// rows gathered from a table [n,cols]
    EmbedLookup { table: NodeId, ids: Vec<usize>, cols: usize },
    GatherRows { a: NodeId, rows: Vec<usize>, cols: usize },
    GatherElems { a: NodeId, idxs: Vec<usize> },
    RepeatInterleave { a: NodeId, times: usize },
    SliceCols { a: NodeId, start: usize, len: usize, rows: usize, total_cols: usize },
    SliceRows { a: NodeId, start: usize, cols: usize },
    ConcatCols { parts: Vec<NodeId>, part_cols: Vec<usize>, rows: usize },
    ConcatRows { parts: Vec<NodeId>, part_rows: Vec<usize>, cols: usize },
    /// y [r] = sum over columns of a [r,c]
    RowSum { a: NodeId, rows: usize, cols: usize },
    /// y [r,c] = a [r,c] / b [r]
    DivBroadcastCol { a: NodeId, b: NodeId, rows: usize, cols: usize },
    MeanAll { a: NodeId, n: usize },
    SumAll { a: NodeId },
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::MatMulNT { a, b, .. }
            | Op::Add { a, b }
            | Op::AddBroadcastRow { a, b, .. }
            | Op::Mul { a, b }
            | Op::DivBroadcastCol { a, b, .. } => vec![*a, *b],
            Op::MulBroadcastRow { a, g, .. } => vec![*a, *g],
            Op::AddConst { a }
            | Op::MulConst { a, .. }
            | Op::Scale { a, .. }
            | Op::Tanh { a }
            | Op::Gelu { a }
            | Op::Log { a }
            | Op::Exp { a }
            | Op::Sqrt { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::GatherRows { a, .. }
            | Op::GatherElems { a, .. }
            | Op::RepeatInterleave { a, .. }
            | Op::SliceCols { a, .. }
            | Op::SliceRows { a, .. }
            | Op::RowSum { a, .. }
            | Op::MeanAll { a, .. }
            | Op::SumAll { a } => vec![*a],
            Op::LayerNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::ConcatCols { parts, .. } | Op::ConcatRows { parts, .. } => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddBroadcastRow { .. } => "add_broadcast_row",
            Op::AddConst { .. } => "add_const",
            Op::Mul { .. } => "mul",
            Op::MulBroadcastRow { .. } => "mul_broadcast_row",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::Tanh { .. } => "tanh",
            Op::Gelu { .. } => "gelu",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Sqrt { .. } => "sqrt",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::RepeatInterleave { .. } => "repeat_interleave",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::RowSum { .. } => "row_sum",
            Op::DivBroadcastCol { .. } => "div_broadcast_col",
            Op::MeanAll { .. } => "mean_all",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
    hook: Option<GradScaleHook>,
}

/// The computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a [m,k] * b^T where b is [n,k]
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// a^T * b where a is [k,m], b is [k,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op, hook: None });
        self.nodes.len() - 1
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].data.len(), 1);
        self.nodes[id].data[0]
    }

    fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].data.len()
    }

    fn rows_cols(&self, id: NodeId) -> (usize, usize) {
        let s = &self.nodes[id].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => {
                let cols = *s.last().unwrap();
                (self.numel(id) / cols, cols)
            }
        }
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> NodeId {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn attach_grad_scale(&mut self, id: NodeId, hook: GradScaleHook) -> Result<(), AutodiffError> {
        if self.nodes[id].hook.is_some() {
            return Err(AutodiffError::HookAlreadyAttached(id));
        }
        for &s in &hook.scale {
            if !s.is_finite() || !(0.0..=1.0).contains(&s) {
                return Err(AutodiffError::InvalidHookScale(s));
            }
        }
        let n = self.numel(id);
        let ok = match hook.broadcast {
            HookBroadcast::Elementwise => hook.scale.len() == n,
            HookBroadcast::PerColumn => {
                let (_, cols) = self.rows_cols(id);
                hook.scale.len() == cols && n % cols == 0
            }
        };
        if !ok {
            return Err(AutodiffError::HookBroadcast { scale_len: hook.scale.len(), node_len: n });
        }
        self.nodes[id].hook = Some(hook);
        Ok(())
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let data = matmul_nn(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, rg, Op::MatMul { a, b, m, k, n })
    }

    /// a [m,k] times transpose of b [n,k]
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.rows_cols(a);
        let (n, k2) = self.rows_cols(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let data = matmul_nt(&self.nodes[a].data, &self.nodes[b].data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], data, rg, Op::MatMulNT { a, b, m, k, n })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.numel(a), self.numel(b), "add length mismatch");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Add { a, b })
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (_, cols) = self.rows_cols(a);
        assert_eq!(self.numel(b), cols, "bias length mismatch");
        let bias = &self.nodes[b].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % cols])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::AddBroadcastRow { a, b, cols })
    }

    /// Elementwise addition of a constant (e.g. an attention padding mask).
    pub fn add_const(&mut self, a: NodeId, c: &[f64]) -> NodeId {
        assert_eq!(self.numel(a), c.len());
        let data: Vec<f64> = self.nodes[a].data.iter().zip(c).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::AddConst { a })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.numel(a), self.numel(b), "mul length mismatch");
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Mul { a, b })
    }

    /// a [r,c] scaled per column by g [c]; the gate-application primitive.
    pub fn mul_row_broadcast(&mut self, a: NodeId, g: NodeId) -> NodeId {
        let (_, cols) = self.rows_cols(a);
        assert_eq!(self.numel(g), cols, "gate length mismatch");
        let gv = &self.nodes[g].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x * gv[i % cols])
            .collect();
        let rg = self.rg(a) || self.rg(g);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::MulBroadcastRow { a, g, cols })
    }

    /// Elementwise multiply by a constant mask (inverted-dropout masks).
    pub fn mul_const(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        assert_eq!(self.numel(a), mask.len());
        let data: Vec<f64> = self.nodes[a].data.iter().zip(&mask).map(|(x, y)| x * y).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::MulConst { a, mask })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Tanh { a })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Gelu { a })
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.ln()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Log { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Exp { a })
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|x| x.sqrt()).collect();
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Sqrt { a })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        let mut data = self.nodes[a].data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::Softmax { a, rows, cols })
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        let mut data = self.nodes[a].data.clone();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.rg(a);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::LogSoftmax { a, rows, cols })
    }

    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        assert_eq!(self.numel(gamma), cols);
        assert_eq!(self.numel(beta), cols);
        let x = &self.nodes[a].data;
        let g = &self.nodes[gamma].data;
        let b = &self.nodes[beta].data;
        let mut data = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut xhat = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                data[r * cols + c] = g[c] * xh + b[c];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::LayerNorm { a, gamma, beta, rows, cols, inv_std, xhat })
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (_n, cols) = self.rows_cols(table);
        let t = &self.nodes[table].data;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(&t[id * cols..(id + 1) * cols]);
        }
        let rg = self.rg(table);
        self.push(vec![ids.len(), cols], data, rg, Op::EmbedLookup { table, ids: ids.to_vec(), cols })
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (_r, cols) = self.rows_cols(a);
        let x = &self.nodes[a].data;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&x[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(a);
        self.push(vec![rows.len(), cols], data, rg, Op::GatherRows { a, rows: rows.to_vec(), cols })
    }

    pub fn gather_elems(&mut self, a: NodeId, idxs: &[usize]) -> NodeId {
        let x = &self.nodes[a].data;
        let data: Vec<f64> = idxs.iter().map(|&i| x[i]).collect();
        let rg = self.rg(a);
        self.push(vec![idxs.len()], data, rg, Op::GatherElems { a, idxs: idxs.to_vec() })
    }

    pub fn repeat_interleave(&mut self, a: NodeId, times: usize) -> NodeId {
        let x = &self.nodes[a].data;
        let mut data = Vec::with_capacity(x.len() * times);
        for &v in x {
            for _ in 0..times {
                data.push(v);
            }
        }
        let rg = self.rg(a);
        self.push(vec![x.len() * times], data, rg, Op::RepeatInterleave { a, times })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, total_cols) = self.rows_cols(a);
        assert!(start + len <= total_cols);
        let x = &self.nodes[a].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&x[r * total_cols + start..r * total_cols + start + len]);
        }
        let rg = self.rg(a);
        self.push(vec![rows, len], data, rg, Op::SliceCols { a, start, len, rows, total_cols })
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        assert!(start + len <= rows);
        let data = self.nodes[a].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(a);
        self.push(vec![len, cols], data, rg, Op::SliceRows { a, start, cols })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (rows, _) = self.rows_cols(parts[0]);
        let part_cols: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).1).collect();
        let total: usize = part_cols.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let pc = part_cols[pi];
            let src = &self.nodes[p].data;
            for r in 0..rows {
                data[r * total + off..r * total + off + pc].copy_from_slice(&src[r * pc..(r + 1) * pc]);
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![rows, total], data, rg, Op::ConcatCols { parts: parts.to_vec(), part_cols, rows })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, cols) = self.rows_cols(parts[0]);
        let part_rows: Vec<usize> = parts.iter().map(|&p| self.rows_cols(p).0).collect();
        let total: usize = part_rows.iter().sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p].data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(vec![total, cols], data, rg, Op::ConcatRows { parts: parts.to_vec(), part_rows, cols })
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        let x = &self.nodes[a].data;
        let data: Vec<f64> = (0..rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum()).collect();
        let rg = self.rg(a);
        self.push(vec![rows], data, rg, Op::RowSum { a, rows, cols })
    }

    /// a [r,c] divided per row by b [r]
    pub fn div_col_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (rows, cols) = self.rows_cols(a);
        assert_eq!(self.numel(b), rows);
        let bv = &self.nodes[b].data;
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x / bv[i / cols])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.nodes[a].shape.clone();
        self.push(shape, data, rg, Op::DivBroadcastCol { a, b, rows, cols })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.numel(a);
        let v = self.nodes[a].data.iter().sum::<f64>() / n as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![v], rg, Op::MeanAll { a, n })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].data.iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(vec![1], vec![v], rg, Op::SumAll { a })
    }

    // ---- backward ----

    fn accum(grad: &mut Option<Vec<f64>>, n: usize, f: impl FnOnce(&mut [f64])) {
        let g = grad.get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    /// Reverse sweep from a scalar root. Populates `grad` on every
    /// requires_grad node reachable from the root.
    pub fn backward(&mut self, root: NodeId) -> Result<(), AutodiffError> {
        if self.numel(root) != 1 {
            return Err(AutodiffError::NonScalarRoot(self.nodes[root].shape.clone()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root].grad = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            // Hook: applied once, after this node's gradient is final.
            if let Some(hook) = self.nodes[id].hook.take() {
                let numel = self.numel(id);
                let cols = self.rows_cols(id).1;
                let g = self.nodes[id].grad.as_mut().unwrap();
                match hook.broadcast {
                    HookBroadcast::Elementwise => {
                        for (gv, s) in g.iter_mut().zip(&hook.scale) {
                            *gv *= s;
                        }
                    }
                    HookBroadcast::PerColumn => {
                        for i in 0..numel {
                            g[i] *= hook.scale[i % cols];
                        }
                    }
                }
                self.nodes[id].hook = Some(hook);
            }
            self.propagate(id)?;
            // Blame the op whose backward rule produced a non-finite value.
            let parents = self.nodes[id].op.parents();
            for p in parents {
                if let Some(g) = self.nodes[p].grad.as_ref() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(AutodiffError::NonFiniteGradient(self.nodes[id].op.name()));
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId) -> Result<(), AutodiffError> {
        let dy = self.nodes[id].grad.clone().unwrap();
        let op = self.nodes[id].op.clone();
        let ydata = std::mem::take(&mut self.nodes[id].data);
        let result = self.propagate_inner(&op, &dy, &ydata);
        self.nodes[id].data = ydata;
        result
    }

    fn propagate_inner(&mut self, op: &Op, dy: &[f64], y: &[f64]) -> Result<(), AutodiffError> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    let db = matmul_nt(dy, &self.nodes[*b].data, m, n, k);
                    let na = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, na, |g| {
                        for (gv, d) in g.iter_mut().zip(&db) {
                            *gv += d;
                        }
                    });
                }
                if self.rg(*b) {
                    let da = matmul_tn(&self.nodes[*a].data, dy, k, m, n);
                    let nb = self.numel(*b);
                    Self::accum(&mut self.nodes[*b].grad, nb, |g| {
                        for (gv, d) in g.iter_mut().zip(&da) {
                            *gv += d;
                        }
                    });
                }
            }
            Op::MatMulNT { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    // dA = dY [m,n] * B [n,k]
                    let d = matmul_nn(dy, &self.nodes[*b].data, m, n, k);
                    let na = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, na, |g| {
                        for (gv, dv) in g.iter_mut().zip(&d) {
                            *gv += dv;
                        }
                    });
                }
                if self.rg(*b) {
                    // dB = dY^T [n,m] * A [m,k]
                    let d = matmul_tn(dy, &self.nodes[*a].data, n, m, k);
                    let nb = self.numel(*b);
                    Self::accum(&mut self.nodes[*b].grad, nb, |g| {
                        for (gv, dv) in g.iter_mut().zip(&d) {
                            *gv += dv;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b].iter() {
                    if self.rg(*p) {
                        let n = self.numel(*p);
                        Self::accum(&mut self.nodes[*p].grad, n, |g| {
                            for (gv, d) in g.iter_mut().zip(dy) {
                                *gv += d;
                            }
                        });
                    }
                }
            }
            Op::AddBroadcastRow { a, b, cols } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for (gv, d) in g.iter_mut().zip(dy) {
                            *gv += d;
                        }
                    });
                }
                if self.rg(*b) {
                    let cols = *cols;
                    Self::accum(&mut self.nodes[*b].grad, cols, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % cols] += d;
                        }
                    });
                }
            }
            Op::AddConst { a } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for (gv, d) in g.iter_mut().zip(dy) {
                            *gv += d;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let bd = self.nodes[*b].data.clone();
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * bd[i];
                        }
                    });
                }
                if self.rg(*b) {
                    let ad = self.nodes[*a].data.clone();
                    let n = self.numel(*b);
                    Self::accum(&mut self.nodes[*b].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * ad[i];
                        }
                    });
                }
            }
            Op::MulBroadcastRow { a, g: gate, cols } => {
                let cols = *cols;
                if self.rg(*a) {
                    let gv = self.nodes[*gate].data.clone();
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * gv[i % cols];
                        }
                    });
                }
                if self.rg(*gate) {
                    let ad = self.nodes[*a].data.clone();
                    Self::accum(&mut self.nodes[*gate].grad, cols, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % cols] += d * ad[i];
                        }
                    });
                }
            }
            Op::MulConst { a, mask } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * mask[i];
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if self.rg(*a) {
                    let c = *c;
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * c;
                        }
                    });
                }
            }
            Op::Tanh { a } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * (1.0 - y[i] * y[i]);
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                if self.rg(*a) {
                    let x = self.nodes[*a].data.clone();
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * gelu_deriv(x[i]);
                        }
                    });
                }
            }
            Op::Log { a } => {
                if self.rg(*a) {
                    let x = self.nodes[*a].data.clone();
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] / x[i];
                        }
                    });
                }
            }
            Op::Exp { a } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] * y[i];
                        }
                    });
                }
            }
            Op::Sqrt { a } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] / (2.0 * y[i]);
                        }
                    });
                }
            }
            Op::Softmax { a, rows, cols } => {
                if self.rg(*a) {
                    let (rows, cols) = (*rows, *cols);
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let dr = &dy[r * cols..(r + 1) * cols];
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                g[r * cols + c] += yr[c] * (dr[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax { a, rows, cols } => {
                if self.rg(*a) {
                    let (rows, cols) = (*rows, *cols);
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for r in 0..rows {
                            let yr = &y[r * cols..(r + 1) * cols];
                            let dr = &dy[r * cols..(r + 1) * cols];
                            let sum: f64 = dr.iter().sum();
                            for c in 0..cols {
                                g[r * cols + c] += dr[c] - yr[c].exp() * sum;
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gamma, beta, rows, cols, inv_std, xhat } => {
                let (rows, cols) = (*rows, *cols);
                if self.rg(*beta) {
                    Self::accum(&mut self.nodes[*beta].grad, cols, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % cols] += d;
                        }
                    });
                }
                if self.rg(*gamma) {
                    Self::accum(&mut self.nodes[*gamma].grad, cols, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[i % cols] += d * xhat[i];
                        }
                    });
                }
                if self.rg(*a) {
                    let gm = self.nodes[*gamma].data.clone();
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for r in 0..rows {
                            let xh = &xhat[r * cols..(r + 1) * cols];
                            let dr = &dy[r * cols..(r + 1) * cols];
                            let mut m1 = 0.0; // mean of dxhat
                            let mut m2 = 0.0; // mean of dxhat * xhat
                            for c in 0..cols {
                                let dxh = dr[c] * gm[c];
                                m1 += dxh;
                                m2 += dxh * xh[c];
                            }
                            m1 /= cols as f64;
                            m2 /= cols as f64;
                            for c in 0..cols {
                                let dxh = dr[c] * gm[c];
                                g[r * cols + c] += inv_std[r] * (dxh - m1 - xh[c] * m2);
                            }
                        }
                    });
                }
            }
            Op::EmbedLookup { table, ids, cols } => {
                if self.rg(*table) {
                    let n = self.numel(*table);
                    let cols = *cols;
                    Self::accum(&mut self.nodes[*table].grad, n, |g| {
                        for (i, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                g[id * cols + c] += dy[i * cols + c];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { a, rows, cols } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    let cols = *cols;
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for (i, &r) in rows.iter().enumerate() {
                            for c in 0..cols {
                                g[r * cols + c] += dy[i * cols + c];
                            }
                        }
                    });
                }
            }
            Op::GatherElems { a, idxs } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for (i, &idx) in idxs.iter().enumerate() {
                            g[idx] += dy[i];
                        }
                    });
                }
            }
            Op::RepeatInterleave { a, times } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    let times = *times;
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            for j in 0..times {
                                g[i] += dy[i * times + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { a, start, len, rows, total_cols } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    let (start, len, rows, total_cols) = (*start, *len, *rows, *total_cols);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for r in 0..rows {
                            for c in 0..len {
                                g[r * total_cols + start + c] += dy[r * len + c];
                            }
                        }
                    });
                }
            }
            Op::SliceRows { a, start, cols } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    let off = start * cols;
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for (i, d) in dy.iter().enumerate() {
                            g[off + i] += d;
                        }
                    });
                }
            }
            Op::ConcatCols { parts, part_cols, rows } => {
                let total: usize = part_cols.iter().sum();
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let pc = part_cols[pi];
                    if self.rg(p) {
                        let n = self.numel(p);
                        let rows = *rows;
                        let o = off;
                        Self::accum(&mut self.nodes[p].grad, n, |g| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    g[r * pc + c] += dy[r * total + o + c];
                                }
                            }
                        });
                    }
                    off += pc;
                }
            }
            Op::ConcatRows { parts, part_rows, cols } => {
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let pr = part_rows[pi];
                    if self.rg(p) {
                        let n = self.numel(p);
                        let o = off * cols;
                        Self::accum(&mut self.nodes[p].grad, n, |g| {
                            for i in 0..pr * cols {
                                g[i] += dy[o + i];
                            }
                        });
                    }
                    off += pr;
                }
            }
            Op::RowSum { a, rows, cols } => {
                if self.rg(*a) {
                    let n = self.numel(*a);
                    let (rows, cols) = (*rows, *cols);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for r in 0..rows {
                            for c in 0..cols {
                                g[r * cols + c] += dy[r];
                            }
                        }
                    });
                }
            }
            Op::DivBroadcastCol { a, b, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let bd = self.nodes[*b].data.clone();
                if self.rg(*a) {
                    let n = self.numel(*a);
                    Self::accum(&mut self.nodes[*a].grad, n, |g| {
                        for i in 0..n {
                            g[i] += dy[i] / bd[i / cols];
                        }
                    });
                }
                if self.rg(*b) {
                    let ad = self.nodes[*a].data.clone();
                    Self::accum(&mut self.nodes[*b].grad, rows, |g| {
                        for r in 0..rows {
                            let mut s = 0.0;
                            for c in 0..cols {
                                let i = r * cols + c;
                                s += dy[i] * ad[i];
                            }
                            g[r] -= s / (bd[r] * bd[r]);
                        }
                    });
                }
            }
            Op::MeanAll { a, n } => {
                if self.rg(*a) {
                    let len = self.numel(*a);
                    let d = dy[0] / *n as f64;
                    Self::accum(&mut self.nodes[*a].grad, len, |g| {
                        for gv in g.iter_mut() {
                            *gv += d;
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.rg(*a) {
                    let len = self.numel(*a);
                    let d = dy[0];
                    Self::accum(&mut self.nodes[*a].grad, len, |g| {
                        for gv in g.iter_mut() {
                            *gv += d;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}
