//! Wengert tape: operations are recorded in forward order and replayed in
//! reverse to accumulate gradients.
//!
//! Tensors live in a tape-owned arena and are addressed by [`TensorId`].
//! Gradients accumulate (sum) across multiple uses of a tensor; callers zero
//! or rebuild tapes between optimization steps. A tape is single-writer;
//! concurrent use is only safe on disjoint tapes.
//!
//! Shape or axis violations are programming errors and panic with a message,
//! as do backward calls on non-scalar outputs.

use crate::kernels;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Backward hook for operations whose rules live outside this crate.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradient contributions per input, given the upstream gradient.
    /// `None` entries contribute nothing.
    fn backward(&self, ctx: CustomCtx<'_>) -> Vec<Option<Vec<f64>>>;
}

/// Everything a custom backward rule may consult.
pub struct CustomCtx<'a> {
    pub out_grad: &'a [f64],
    pub out_data: &'a [f64],
    pub inputs: Vec<(&'a [f64], &'a [usize])>,
}

enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddRowBroadcast { x: TensorId, bias: TensorId },
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    MatMulNt { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Transpose { a: TensorId, rows: usize, cols: usize },
    Reshape { a: TensorId },
    ConcatRows { inputs: Vec<TensorId>, cols: usize },
    SliceRows { a: TensorId, start: usize, cols: usize },
    SliceCols { a: TensorId, start: usize, cols_in: usize },
    ConcatCols { inputs: Vec<TensorId>, rows: usize },
    GatherRows { a: TensorId, index: Vec<Option<usize>>, cols: usize },
    Sigmoid { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LogSoftmax { a: TensorId, axis: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    Swish { a: TensorId },
    Embedding { table: TensorId, ids: Vec<usize>, dim: usize },
    Conv1d { x: TensorId, w: TensorId, b: TensorId, t: usize, c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv1d { x: TensorId, w: TensorId, t: usize, c: usize, kernel: usize, stride: usize, pad: usize },
    Sum { a: TensorId },
    Mean { a: TensorId },
    Pick { a: TensorId, ids: Vec<usize>, vocab: usize },
    MaskedMean { a: TensorId, mask: Vec<bool>, count: usize },
    Custom { inputs: Vec<TensorId>, op: Box<dyn CustomOp> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Recording arena for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Decompose `shape` around `axis` into (outer, axis_size, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    /// Insert a leaf tensor. Gradients are accumulated for it when
    /// `requires_grad` is set and it is reachable from the loss.
    #[track_caller]
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(&shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives gradients (masks, positional tables, inputs).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    #[track_caller]
    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "add");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        self.push(data, shape, rg, Op::Add { a, b })
    }

    #[track_caller]
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "sub");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        self.push(data, shape, rg, Op::Sub { a, b })
    }

    #[track_caller]
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.assert_same_shape(a, b, "mul");
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires(&[a, b]);
        self.push(data, shape, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Scale { a, c })
    }

    /// x[..., d] + bias[d], bias broadcast over leading rows.
    #[track_caller]
    pub fn add_row_broadcast(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let d = *self.nodes[x.0].shape.last().expect("add_row_broadcast on 0-d tensor");
        assert_eq!(
            self.nodes[bias.0].shape,
            vec![d],
            "bias shape {:?} does not match last dim {}",
            self.nodes[bias.0].shape,
            d
        );
        let bias_data = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias_data.iter()).map(|(x, b)| x + b))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x, bias]);
        self.push(data, shape, rg, Op::AddRowBroadcast { x, bias })
    }

    pub fn swish(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kernels::swish(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Swish { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Sigmoid { a })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    #[track_caller]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.dims2(a, "matmul lhs");
        let (k2, n) = self.dims2(b, "matmul rhs");
        assert_eq!(k, k2, "matmul inner dimensions disagree: {k} vs {k2}");
        let data = kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_requires(&[a, b]);
        self.push(data, vec![m, n], rg, Op::MatMul { a, b, m, k, n })
    }

    /// a[m,k] @ b[n,k]^T -> [m,n].
    #[track_caller]
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.dims2(a, "matmul_nt lhs");
        let (n, k2) = self.dims2(b, "matmul_nt rhs");
        assert_eq!(k, k2, "matmul_nt inner dimensions disagree: {k} vs {k2}");
        let data = kernels::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let rg = self.any_requires(&[a, b]);
        self.push(data, vec![m, n], rg, Op::MatMulNt { a, b, m, k, n })
    }

    #[track_caller]
    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.dims2(a, "transpose");
        let data = kernels::transpose(&self.nodes[a.0].data, rows, cols);
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![cols, rows], rg, Op::Transpose { a, rows, cols })
    }

    #[track_caller]
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        assert_eq!(
            numel(&self.nodes[a.0].shape),
            numel(&shape),
            "reshape from {:?} to {:?} changes element count",
            self.nodes[a.0].shape,
            shape
        );
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Reshape { a })
    }

    // ── Row/column assembly ─────────────────────────────────────────────

    #[track_caller]
    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_rows of nothing");
        let (_, cols) = self.dims2(inputs[0], "concat_rows");
        let mut data = Vec::new();
        let mut rows = 0;
        for &id in inputs {
            let (r, c) = self.dims2(id, "concat_rows");
            assert_eq!(c, cols, "concat_rows column mismatch: {c} vs {cols}");
            rows += r;
            data.extend_from_slice(&self.nodes[id.0].data);
        }
        let rg = self.any_requires(inputs);
        self.push(data, vec![rows, cols], rg, Op::ConcatRows { inputs: inputs.to_vec(), cols })
    }

    #[track_caller]
    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (rows, cols) = self.dims2(a, "slice_rows");
        assert!(start + len <= rows, "slice_rows {start}..{} out of {rows} rows", start + len);
        let data = self.nodes[a.0].data[start * cols..(start + len) * cols].to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![len, cols], rg, Op::SliceRows { a, start, cols })
    }

    #[track_caller]
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (rows, cols) = self.dims2(a, "slice_cols");
        assert!(start + len <= cols, "slice_cols {start}..{} out of {cols} cols", start + len);
        let src = &self.nodes[a.0].data;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![rows, len], rg, Op::SliceCols { a, start, cols_in: cols })
    }

    #[track_caller]
    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> TensorId {
        assert!(!inputs.is_empty(), "concat_cols of nothing");
        let (rows, _) = self.dims2(inputs[0], "concat_cols");
        let widths: Vec<usize> = inputs
            .iter()
            .map(|&id| {
                let (r, c) = self.dims2(id, "concat_cols");
                assert_eq!(r, rows, "concat_cols row mismatch: {r} vs {rows}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&id, &w) in inputs.iter().zip(widths.iter()) {
                let src = &self.nodes[id.0].data;
                data.extend_from_slice(&src[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_requires(inputs);
        self.push(data, vec![rows, total], rg, Op::ConcatCols { inputs: inputs.to_vec(), rows })
    }

    /// Rebuild rows by index: output row r is `a[index[r]]`, or zeros for
    /// `None` (padding slots). Backward scatter-adds into the source rows.
    #[track_caller]
    pub fn gather_rows(&mut self, a: TensorId, index: &[Option<usize>]) -> TensorId {
        let (rows, cols) = self.dims2(a, "gather_rows");
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; index.len() * cols];
        for (r, idx) in index.iter().enumerate() {
            if let Some(s) = *idx {
                assert!(s < rows, "gather_rows index {s} out of {rows} rows");
                data[r * cols..(r + 1) * cols].copy_from_slice(&src[s * cols..(s + 1) * cols]);
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![index.len(), cols], rg, Op::GatherRows { a, index: index.to_vec(), cols })
    }

    // ── Normalization and activations over axes ─────────────────────────

    #[track_caller]
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, size, inner) = axis_split(&shape, axis);
        let mut data = self.nodes[a.0].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                if inner == 1 {
                    kernels::softmax_row_inplace(&mut data[o * size..(o + 1) * size]);
                } else {
                    let mut lane: Vec<f64> =
                        (0..size).map(|s| data[(o * size + s) * inner + i]).collect();
                    kernels::softmax_row_inplace(&mut lane);
                    for (s, v) in lane.into_iter().enumerate() {
                        data[(o * size + s) * inner + i] = v;
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Softmax { a, axis })
    }

    #[track_caller]
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let (outer, size, inner) = axis_split(&shape, axis);
        let mut data = self.nodes[a.0].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                if inner == 1 {
                    kernels::log_softmax_row_inplace(&mut data[o * size..(o + 1) * size]);
                } else {
                    let mut lane: Vec<f64> =
                        (0..size).map(|s| data[(o * size + s) * inner + i]).collect();
                    kernels::log_softmax_row_inplace(&mut lane);
                    for (s, v) in lane.into_iter().enumerate() {
                        data[(o * size + s) * inner + i] = v;
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::LogSoftmax { a, axis })
    }

    /// Layer norm over the last axis with per-feature gain and bias.
    #[track_caller]
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorId {
        let d = *self.nodes[x.0].shape.last().expect("layer_norm on 0-d tensor");
        assert_eq!(self.nodes[gain.0].shape, vec![d], "layer_norm gain shape");
        assert_eq!(self.nodes[bias.0].shape, vec![d], "layer_norm bias shape");
        let n = self.nodes[x.0].data.len();
        let mut data = vec![0.0; n];
        {
            let xs = &self.nodes[x.0].data;
            let g = &self.nodes[gain.0].data;
            let b = &self.nodes[bias.0].data;
            for (row, out) in xs.chunks(d).zip(data.chunks_mut(d)) {
                kernels::layer_norm_row(row, g, b, eps, out);
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.any_requires(&[x, gain, bias]);
        self.push(data, shape, rg, Op::LayerNorm { x, gain, bias, eps })
    }

    // ── Lookup, convolution ─────────────────────────────────────────────

    #[track_caller]
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let (vocab, dim) = self.dims2(table, "embedding table");
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of vocab {vocab}");
            data.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let rg = self.nodes[table.0].requires_grad;
        self.push(data, vec![ids.len(), dim], rg, Op::Embedding { table, ids: ids.to_vec(), dim })
    }

    /// Dense 1-D convolution. x: [t, c_in], w: [c_out, c_in, kernel], b: [c_out].
    #[track_caller]
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize) -> TensorId {
        let (t, c_in) = self.dims2(x, "conv1d input");
        let wshape = self.nodes[w.0].shape.clone();
        assert_eq!(wshape.len(), 3, "conv1d weight must be [c_out, c_in, k], got {wshape:?}");
        let (c_out, c_in2, kernel) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(c_in, c_in2, "conv1d channel mismatch: {c_in} vs {c_in2}");
        assert_eq!(self.nodes[b.0].shape, vec![c_out], "conv1d bias shape");
        let data = kernels::conv1d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &self.nodes[b.0].data,
            t,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        );
        let t_out = kernels::conv_out_len(t, kernel, stride, pad);
        let rg = self.any_requires(&[x, w, b]);
        self.push(data, vec![t_out, c_out], rg, Op::Conv1d { x, w, b, t, c_in, c_out, kernel, stride, pad })
    }

    /// Depthwise 1-D convolution. x: [t, c], w: [c, kernel].
    #[track_caller]
    pub fn depthwise_conv1d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let (t, c) = self.dims2(x, "depthwise_conv1d input");
        let (c2, kernel) = self.dims2(w, "depthwise_conv1d weight");
        assert_eq!(c, c2, "depthwise_conv1d channel mismatch: {c} vs {c2}");
        let data = kernels::depthwise_conv1d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            t,
            c,
            kernel,
            stride,
            pad,
        );
        let t_out = kernels::conv_out_len(t, kernel, stride, pad);
        let rg = self.any_requires(&[x, w]);
        self.push(data, vec![t_out, c], rg, Op::DepthwiseConv1d { x, w, t, c, kernel, stride, pad })
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::Mean { a })
    }

    /// out[i] = a[i, ids[i]] for a: [rows, vocab].
    #[track_caller]
    pub fn pick(&mut self, a: TensorId, ids: &[usize]) -> TensorId {
        let (rows, vocab) = self.dims2(a, "pick");
        assert_eq!(ids.len(), rows, "pick needs one id per row ({rows}), got {}", ids.len());
        let src = &self.nodes[a.0].data;
        let data: Vec<f64> = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                assert!(id < vocab, "pick id {id} out of vocab {vocab}");
                src[i * vocab + id]
            })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, vec![rows], rg, Op::Pick { a, ids: ids.to_vec(), vocab })
    }

    /// Mean over the positions where `mask` is true. Errors on all-false masks
    /// are the caller's contract; this panics.
    #[track_caller]
    pub fn masked_mean(&mut self, a: TensorId, mask: &[bool]) -> TensorId {
        assert_eq!(mask.len(), self.nodes[a.0].data.len(), "masked_mean mask length");
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "masked_mean over an all-false mask");
        let s: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum::<f64>()
            / count as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![s], vec![1], rg, Op::MaskedMean { a, mask: mask.to_vec(), count })
    }

    /// Record an externally defined operation with its own backward rule.
    #[track_caller]
    pub fn custom(
        &mut self,
        inputs: &[TensorId],
        data: Vec<f64>,
        shape: Vec<usize>,
        op: Box<dyn CustomOp>,
    ) -> TensorId {
        assert_eq!(data.len(), numel(&shape), "custom op output shape mismatch");
        let rg = self.any_requires(inputs);
        self.push(data, shape, rg, Op::Custom { inputs: inputs.to_vec(), op })
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every `requires_grad` tensor
    /// reachable from the loss accumulates its exact reverse-mode gradient.
    #[track_caller]
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].shape
        );
        self.accumulate(loss, &[1.0]);
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            self.apply_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
        }
    }

    fn accumulate(&mut self, id: TensorId, values: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, v) in grad.iter_mut().zip(values.iter()) {
            *g += v;
        }
    }

    fn accumulate_at(&mut self, id: TensorId, offset: usize, values: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, v) in grad[offset..offset + values.len()].iter_mut().zip(values.iter()) {
            *g += v;
        }
    }

    fn apply_backward(&mut self, i: usize, g: &[f64]) {
        // Ops holding owned index data are temporarily swapped out so the
        // arena can be borrowed mutably while their rule runs.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b.0].data.iter())
                    .map(|(g, b)| g * b)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].data.iter())
                    .map(|(g, a)| g * a)
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(*a, &da);
            }
            Op::AddRowBroadcast { x, bias } => {
                self.accumulate(*x, g);
                let d = self.nodes[bias.0].data.len();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    for (acc, v) in db.iter_mut().zip(row.iter()) {
                        *acc += v;
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    // dA = g @ B^T
                    let da = kernels::matmul_nt(g, &self.nodes[b.0].data, *m, *n, *k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ g
                    let at = kernels::transpose(&self.nodes[a.0].data, *m, *k);
                    let db = kernels::matmul(&at, g, *k, *m, *n);
                    self.accumulate(*b, &db);
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                if self.nodes[a.0].requires_grad {
                    // dA = g @ B
                    let da = kernels::matmul(g, &self.nodes[b.0].data, *m, *n, *k);
                    self.accumulate(*a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = g^T @ A
                    let gt = kernels::transpose(g, *m, *n);
                    let db = kernels::matmul(&gt, &self.nodes[a.0].data, *n, *m, *k);
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose { a, rows, cols } => {
                let da = kernels::transpose(g, *cols, *rows);
                self.accumulate(*a, &da);
            }
            Op::Reshape { a } => self.accumulate(*a, g),
            Op::ConcatRows { inputs, cols } => {
                let mut offset = 0;
                for &id in inputs {
                    let rows = self.nodes[id.0].shape[0];
                    let chunk: Vec<f64> = g[offset..offset + rows * cols].to_vec();
                    self.accumulate(id, &chunk);
                    offset += rows * cols;
                }
            }
            Op::SliceRows { a, start, cols } => {
                self.accumulate_at(*a, start * cols, g);
            }
            Op::SliceCols { a, start, cols_in } => {
                let rows = self.nodes[i].shape[0];
                let width = self.nodes[i].shape[1];
                let node = &mut self.nodes[a.0];
                if node.requires_grad {
                    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for r in 0..rows {
                        for c in 0..width {
                            grad[r * cols_in + start + c] += g[r * width + c];
                        }
                    }
                }
            }
            Op::ConcatCols { inputs, rows } => {
                let widths: Vec<usize> = inputs.iter().map(|&id| self.nodes[id.0].shape[1]).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&id, &w) in inputs.iter().zip(widths.iter()) {
                    if self.nodes[id.0].requires_grad {
                        let mut chunk = vec![0.0; rows * w];
                        for r in 0..*rows {
                            chunk[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(id, &chunk);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { a, index, cols } => {
                let node = &mut self.nodes[a.0];
                if node.requires_grad {
                    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(s) = *idx {
                            for c in 0..*cols {
                                grad[s * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let shape = self.nodes[i].shape.clone();
                let (outer, size, inner) = axis_split(&shape, *axis);
                let out = &self.nodes[i].data;
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for inr in 0..inner {
                        let at = |s: usize| (o * size + s) * inner + inr;
                        let dot: f64 = (0..size).map(|s| g[at(s)] * out[at(s)]).sum();
                        for s in 0..size {
                            da[at(s)] = out[at(s)] * (g[at(s)] - dot);
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSoftmax { a, axis } => {
                let shape = self.nodes[i].shape.clone();
                let (outer, size, inner) = axis_split(&shape, *axis);
                let out = &self.nodes[i].data;
                let mut da = vec![0.0; out.len()];
                for o in 0..outer {
                    for inr in 0..inner {
                        let at = |s: usize| (o * size + s) * inner + inr;
                        let gsum: f64 = (0..size).map(|s| g[at(s)]).sum();
                        for s in 0..size {
                            da[at(s)] = g[at(s)] - out[at(s)].exp() * gsum;
                        }
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let xs = self.nodes[x.0].data.clone();
                let gain_data = self.nodes[gain.0].data.clone();
                let rows = xs.len() / d;
                let mut dx = vec![0.0; xs.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv_std).collect();
                    for j in 0..d {
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                    let dxhat: Vec<f64> = grow.iter().zip(gain_data.iter()).map(|(g, gm)| g * gm).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*gain, &dgain);
                self.accumulate(*bias, &dbias);
            }
            Op::Sigmoid { a } => {
                // out = s, ds/dx = s(1-s); read s from the output buffer.
                let da: Vec<f64> = self.nodes[i]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Swish { a } => {
                let da: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(g.iter())
                    .map(|(&x, &gv)| {
                        let s = kernels::sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(*a, &da);
            }
            Op::Embedding { table, ids, dim } => {
                let node = &mut self.nodes[table.0];
                if node.requires_grad {
                    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            grad[id * dim + c] += g[r * dim + c];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, t, c_in, c_out, kernel, stride, pad } => {
                let t_out = kernels::conv_out_len(*t, *kernel, *stride, *pad);
                let xs = self.nodes[x.0].data.clone();
                let ws = self.nodes[w.0].data.clone();
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                let mut db = vec![0.0; *c_out];
                for ti in 0..t_out {
                    let start = (ti * stride) as isize - *pad as isize;
                    for co in 0..*c_out {
                        let gv = g[ti * c_out + co];
                        db[co] += gv;
                        let w_base = co * c_in * kernel;
                        for kk in 0..*kernel {
                            let src = start + kk as isize;
                            if src < 0 || src >= *t as isize {
                                continue;
                            }
                            let xi = src as usize * c_in;
                            for ci in 0..*c_in {
                                dx[xi + ci] += gv * ws[w_base + ci * kernel + kk];
                                dw[w_base + ci * kernel + kk] += gv * xs[xi + ci];
                            }
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
                self.accumulate(*b, &db);
            }
            Op::DepthwiseConv1d { x, w, t, c, kernel, stride, pad } => {
                let t_out = kernels::conv_out_len(*t, *kernel, *stride, *pad);
                let xs = self.nodes[x.0].data.clone();
                let ws = self.nodes[w.0].data.clone();
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                for ti in 0..t_out {
                    let start = (ti * stride) as isize - *pad as isize;
                    for kk in 0..*kernel {
                        let src = start + kk as isize;
                        if src < 0 || src >= *t as isize {
                            continue;
                        }
                        let xi = src as usize * c;
                        for ci in 0..*c {
                            let gv = g[ti * c + ci];
                            dx[xi + ci] += gv * ws[ci * kernel + kk];
                            dw[ci * kernel + kk] += gv * xs[xi + ci];
                        }
                    }
                }
                self.accumulate(*x, &dx);
                self.accumulate(*w, &dw);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; self.nodes[a.0].data.len()];
                self.accumulate(*a, &da);
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].data.len();
                let da = vec![g[0] / n as f64; n];
                self.accumulate(*a, &da);
            }
            Op::Pick { a, ids, vocab } => {
                let node = &mut self.nodes[a.0];
                if node.requires_grad {
                    let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                    for (r, &id) in ids.iter().enumerate() {
                        grad[r * vocab + id] += g[r];
                    }
                }
            }
            Op::MaskedMean { a, mask, count } => {
                let scale = g[0] / *count as f64;
                let da: Vec<f64> = mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
                self.accumulate(*a, &da);
            }
            Op::Custom { inputs, op } => {
                let input_refs: Vec<(&[f64], &[usize])> = inputs
                    .iter()
                    .map(|&id| (self.nodes[id.0].data.as_slice(), self.nodes[id.0].shape.as_slice()))
                    .collect();
                let grads = op.backward(CustomCtx {
                    out_grad: g,
                    out_data: &self.nodes[i].data,
                    inputs: input_refs,
                });
                assert_eq!(grads.len(), inputs.len(), "custom op '{}' returned wrong grad count", op.name());
                let pairs: Vec<(TensorId, Option<Vec<f64>>)> =
                    inputs.iter().copied().zip(grads).collect();
                for (id, grad) in pairs {
                    if let Some(grad) = grad {
                        self.accumulate(id, &grad);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[track_caller]
    fn dims2(&self, id: TensorId, what: &str) -> (usize, usize) {
        let shape = &self.nodes[id.0].shape;
        assert_eq!(shape.len(), 2, "{what} expects a 2-d tensor, got shape {shape:?}");
        (shape[0], shape[1])
    }

    #[track_caller]
    fn assert_same_shape(&self, a: TensorId, b: TensorId, what: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{what} shape mismatch: {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }
}
