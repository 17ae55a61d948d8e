//! Reverse-mode differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] in topological order; [`Tape::grad`]
//! replays them backwards, accumulating vector-Jacobian products. The op set
//! is exactly what the networks in this crate need, plus a fused correlation
//! node (see [`super::correlation`]) whose subgradient is computed in closed
//! form at forward time.

use super::correlation::{correlation_objective, CorrelationWitness};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Softmax normalization axis for 2D score matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoftmaxAxis {
    /// Each row sums to 1.
    Rows,
    /// Each column sums to 1.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    AddBiasCol(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax {
        input: NodeId,
        axis: SoftmaxAxis,
        mask: Option<Vec<bool>>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: (usize, usize),
    },
    LstmStep {
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        bias: NodeId,
        gates: Box<LstmCache>,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        lo: usize,
        hi: usize,
    },
    FlattenToCols(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Correlation {
        h1: NodeId,
        h2: NodeId,
        d_h1: Tensor,
        d_h2: Tensor,
        witness: Box<CorrelationWitness>,
    },
    BahdanauScores {
        proj1: NodeId,
        proj2: NodeId,
        v: NodeId,
        tanh_cache: Vec<f64>,
    },
    CccLoss {
        pred: NodeId,
        grad_pred: Tensor,
    },
}

#[derive(Debug)]
struct LstmCache {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tc: Vec<f64>,
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by node id; only leaves with `requires_grad` are retained.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Row-major GEMM: `c := alpha * a @ b + beta * c`, with optional logical
/// transposes applied through strides (operands are never copied).
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc(n),
            1,
        );
    }
}

fn rsc(n: usize) -> isize {
    n as isize
}

fn conv_out(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

/// Gather a `[C, H, W]` frame into an im2col matrix of shape
/// `[C*KH*KW, OH*OW]` (row-major).
#[allow(clippy::too_many_arguments)]
fn im2col(
    frame: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let n = oh * ow;
    for c in 0..c_in {
        for dh in 0..kh {
            for dw in 0..kw {
                let krow = (c * kh + dh) * kw + dw;
                let dst = &mut col[krow * n..(krow + 1) * n];
                for oy in 0..oh {
                    let src_row = &frame[c * h * w + (oy * sh + dh) * w..];
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src_row[ox * sw + dw];
                    }
                }
            }
        }
    }
}

/// Scatter-add the im2col gradient back onto the input frame.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
    frame: &mut [f64],
) {
    let n = oh * ow;
    for c in 0..c_in {
        for dh in 0..kh {
            for dw in 0..kw {
                let krow = (c * kh + dh) * kw + dw;
                let src = &col[krow * n..(krow + 1) * n];
                for oy in 0..oh {
                    let dst_row = &mut frame[c * h * w + (oy * sh + dh) * w..];
                    for ox in 0..ow {
                        dst_row[ox * sw + dw] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an input tensor. Only leaves with `requires_grad` receive
    /// gradients from [`Tape::grad`].
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let t = t.requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !ta.same_shape(tb) {
            return Err(Error::contract(
                name,
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, value, needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a].value.map(|x| x * factor);
        let needs = self.needs(a);
        self.push(Op::Scale(a, factor), value, needs)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(f64::tanh);
        let needs = self.needs(a);
        self.push(Op::Tanh(a), value, needs)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a].value.map(sigmoid);
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, needs)
    }

    /// 2D matrix product `a @ b`. Vectors on the right are treated as
    /// single-column matrices.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = mat_dims("matmul", ta)?;
        let (kb, n) = mat_dims("matmul", tb)?;
        if k != kb {
            return Err(Error::contract(
                "matmul",
                format!("inner dims differ: {:?} @ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let shape = if tb.shape().len() == 1 {
            vec![m]
        } else {
            vec![m, n]
        };
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), value, needs))
    }

    /// Add a column vector to every column of a matrix.
    pub fn add_bias_col(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[bias].value);
        let (m, n) = mat_dims("add_bias_col", ta)?;
        if tb.shape() != [m] {
            return Err(Error::contract(
                "add_bias_col",
                format!("bias {:?} does not match matrix {:?}", tb.shape(), ta.shape()),
            ));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            let b = tb.data()[i];
            for x in &mut data[i * n..(i + 1) * n] {
                *x += b;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBiasCol(a, bias), value, needs))
    }

    /// Softmax along one axis of a 2D matrix, with an optional keep-mask.
    /// Masked entries get zero weight; a fully masked line is an error.
    pub fn softmax(
        &mut self,
        input: NodeId,
        axis: SoftmaxAxis,
        mask: Option<Vec<bool>>,
    ) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        let (rows, cols) = mat_dims("softmax", t)?;
        if let Some(m) = &mask {
            if m.len() != rows * cols {
                return Err(Error::contract(
                    "softmax",
                    format!("mask length {} != {}x{}", m.len(), rows, cols),
                ));
            }
        }
        let keep = |mask: &Option<Vec<bool>>, i: usize, j: usize| {
            mask.as_ref().map_or(true, |m| m[i * cols + j])
        };
        let mut out = vec![0.0; rows * cols];
        let (lines, line_len) = match axis {
            SoftmaxAxis::Rows => (rows, cols),
            SoftmaxAxis::Cols => (cols, rows),
        };
        for line in 0..lines {
            let idx = |p: usize| match axis {
                SoftmaxAxis::Rows => (line, p),
                SoftmaxAxis::Cols => (p, line),
            };
            let mut max = f64::NEG_INFINITY;
            for p in 0..line_len {
                let (i, j) = idx(p);
                if keep(&mask, i, j) {
                    max = max.max(t.at2(i, j));
                }
            }
            if max == f64::NEG_INFINITY {
                let axis_name = match axis {
                    SoftmaxAxis::Rows => "row",
                    SoftmaxAxis::Cols => "column",
                };
                return Err(Error::DegenerateMask {
                    line,
                    axis: axis_name,
                });
            }
            let mut denom = 0.0;
            for p in 0..line_len {
                let (i, j) = idx(p);
                if keep(&mask, i, j) {
                    let e = (t.at2(i, j) - max).exp();
                    out[i * cols + j] = e;
                    denom += e;
                }
            }
            for p in 0..line_len {
                let (i, j) = idx(p);
                out[i * cols + j] /= denom;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(input);
        Ok(self.push(Op::Softmax { input, axis, mask }, value, needs))
    }

    /// Valid-padding 2D convolution of a `[B, C, H, W]` batch with a
    /// `[F, C, KH, KW]` weight tensor.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: (usize, usize)) -> Result<NodeId> {
        let (ti, tw) = (&self.nodes[input].value, &self.nodes[weight].value);
        let ishape = ti.shape();
        let wshape = tw.shape();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(Error::contract(
                "conv2d",
                format!("want 4D input and weight, got {ishape:?} and {wshape:?}"),
            ));
        }
        let (b, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, cw, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let (sh, sw) = stride;
        if c != cw || sh == 0 || sw == 0 {
            return Err(Error::contract(
                "conv2d",
                format!("channels/stride mismatch: input {ishape:?}, weight {wshape:?}, stride {stride:?}"),
            ));
        }
        let (oh, ow) = match (conv_out(h, kh, sh), conv_out(w, kw, sw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::contract(
                    "conv2d",
                    format!("kernel {kh}x{kw} larger than input {h}x{w}"),
                ))
            }
        };
        let k = c * kh * kw;
        let n = oh * ow;
        let mut out = vec![0.0; b * f * n];
        let mut col = vec![0.0; k * n];
        for bi in 0..b {
            let frame = &ti.data()[bi * c * h * w..(bi + 1) * c * h * w];
            im2col(frame, c, h, w, kh, kw, sh, sw, oh, ow, &mut col);
            gemm(
                f,
                k,
                n,
                1.0,
                tw.data(),
                false,
                &col,
                false,
                0.0,
                &mut out[bi * f * n..(bi + 1) * f * n],
            );
        }
        let value = Tensor::new(vec![b, f, oh, ow], out)?;
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.push(Op::Conv2d { input, weight, stride }, value, needs))
    }

    /// One LSTM cell step on vectors. Weights are `[4H, I]` / `[4H, H]` /
    /// `[4H]` with gate blocks ordered input, forget, candidate, output.
    /// Returns the concatenated `[h'; c']` node; slice it to thread state.
    pub fn lstm_step(
        &mut self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        bias: NodeId,
    ) -> Result<NodeId> {
        let dim_in = self.nodes[x].value.len();
        let dim_h = self.nodes[h].value.len();
        let shapes_ok = self.nodes[c].value.len() == dim_h
            && self.nodes[w_x].value.shape() == [4 * dim_h, dim_in]
            && self.nodes[w_h].value.shape() == [4 * dim_h, dim_h]
            && self.nodes[bias].value.shape() == [4 * dim_h];
        if !shapes_ok {
            return Err(Error::contract(
                "lstm_step",
                format!(
                    "x {:?}, h {:?}, c {:?}, w_x {:?}, w_h {:?}, bias {:?}",
                    self.nodes[x].value.shape(),
                    self.nodes[h].value.shape(),
                    self.nodes[c].value.shape(),
                    self.nodes[w_x].value.shape(),
                    self.nodes[w_h].value.shape(),
                    self.nodes[bias].value.shape()
                ),
            ));
        }
        let mut z = self.nodes[bias].value.data().to_vec();
        gemm(
            4 * dim_h,
            dim_in,
            1,
            1.0,
            self.nodes[w_x].value.data(),
            false,
            self.nodes[x].value.data(),
            false,
            1.0,
            &mut z,
        );
        gemm(
            4 * dim_h,
            dim_h,
            1,
            1.0,
            self.nodes[w_h].value.data(),
            false,
            self.nodes[h].value.data(),
            false,
            1.0,
            &mut z,
        );
        let i: Vec<f64> = z[..dim_h].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[dim_h..2 * dim_h].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * dim_h..3 * dim_h].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * dim_h..].iter().map(|&v| sigmoid(v)).collect();
        let c_prev = self.nodes[c].value.data();
        let c_new: Vec<f64> = (0..dim_h).map(|t| f[t] * c_prev[t] + i[t] * g[t]).collect();
        let tc: Vec<f64> = c_new.iter().map(|&v| v.tanh()).collect();
        let mut hc = Vec::with_capacity(2 * dim_h);
        hc.extend((0..dim_h).map(|t| o[t] * tc[t]));
        hc.extend_from_slice(&c_new);
        let value = Tensor::vector(hc);
        let needs = [x, h, c, w_x, w_h, bias].iter().any(|&id| self.needs(id));
        Ok(self.push(
            Op::LstmStep {
                x,
                h,
                c,
                w_x,
                w_h,
                bias,
                gates: Box::new(LstmCache { i, f, g, o, tc }),
            },
            value,
            needs,
        ))
    }

    /// Concatenate matrices (or vectors, as single columns) side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no inputs".to_string()));
        }
        let m = mat_dims("concat_cols", &self.nodes[parts[0]].value)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mi, ni) = mat_dims("concat_cols", &self.nodes[p].value)?;
            if mi != m {
                return Err(Error::contract(
                    "concat_cols",
                    format!("row count mismatch: {mi} vs {m}"),
                ));
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p].value.data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(vec![m, n], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, needs))
    }

    /// Columns `lo..hi` of a matrix. A vector input is treated as one row,
    /// so this doubles as element slicing.
    pub fn slice_cols(&mut self, input: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        let (m, n) = row_dims("slice_cols", t)?;
        if lo >= hi || hi > n {
            return Err(Error::contract(
                "slice_cols",
                format!("range {lo}..{hi} out of 0..{n}"),
            ));
        }
        let w = hi - lo;
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&t.data()[r * n + lo..r * n + hi]);
        }
        let shape = if t.shape().len() == 1 {
            vec![w]
        } else {
            vec![m, w]
        };
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(input);
        Ok(self.push(Op::SliceCols { input, lo, hi }, value, needs))
    }

    /// Reshape a `[B, ...]` batch so that each item becomes one column of a
    /// `[numel/B, B]` matrix (used to hand conv features to dense layers).
    pub fn flatten_to_cols(&mut self, input: NodeId) -> Result<NodeId> {
        let t = &self.nodes[input].value;
        if t.shape().len() < 2 {
            return Err(Error::contract(
                "flatten_to_cols",
                format!("want batched tensor, got {:?}", t.shape()),
            ));
        }
        let b = t.shape()[0];
        let d: usize = t.shape()[1..].iter().product();
        let mut out = vec![0.0; d * b];
        for bi in 0..b {
            for r in 0..d {
                out[r * b + bi] = t.data()[bi * d + r];
            }
        }
        let value = Tensor::new(vec![d, b], out)?;
        let needs = self.needs(input);
        Ok(self.push(Op::FlattenToCols(input), value, needs))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.nodes[input].value.data().iter().sum();
        let needs = self.needs(input);
        self.push(Op::Sum(input), Tensor::scalar(s), needs)
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let t = &self.nodes[input].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.needs(input);
        self.push(Op::Mean(input), Tensor::scalar(s), needs)
    }

    /// Fused canonical-correlation node: records the nuclear norm of the
    /// whitened cross-covariance of two `d x T` views, with its closed-form
    /// subgradient cached for the backward pass.
    pub fn correlation(&mut self, h1: NodeId, h2: NodeId, ridge: f64) -> Result<NodeId> {
        let (t1, t2) = (&self.nodes[h1].value, &self.nodes[h2].value);
        let (value, d_h1, d_h2, witness) = correlation_objective(t1, t2, ridge)?;
        let needs = self.needs(h1) || self.needs(h2);
        Ok(self.push(
            Op::Correlation {
                h1,
                h2,
                d_h1,
                d_h2,
                witness: Box::new(witness),
            },
            Tensor::scalar(value),
            needs,
        ))
    }

    /// The correlation witness recorded by a [`Tape::correlation`] node.
    pub fn correlation_witness(&self, id: NodeId) -> Option<&CorrelationWitness> {
        match &self.nodes[id].op {
            Op::Correlation { witness, .. } => Some(witness),
            _ => None,
        }
    }

    /// Additive attention scores from projected features: given
    /// `proj1 = W_t @ H1` (`d_a x T1`), `proj2 = W_s @ H2` (`d_a x T2`) and
    /// `v` (`d_a`), computes `S[i, j] = v . tanh(proj1[:, i] + proj2[:, j])`.
    pub fn bahdanau_scores(&mut self, proj1: NodeId, proj2: NodeId, v: NodeId) -> Result<NodeId> {
        let (tp, tq, tv) = (
            &self.nodes[proj1].value,
            &self.nodes[proj2].value,
            &self.nodes[v].value,
        );
        let (da, n1) = mat_dims("bahdanau_scores", tp)?;
        let (da2, n2) = mat_dims("bahdanau_scores", tq)?;
        if da != da2 || tv.shape() != [da] {
            return Err(Error::contract(
                "bahdanau_scores",
                format!(
                    "proj1 {:?}, proj2 {:?}, v {:?}",
                    tp.shape(),
                    tq.shape(),
                    tv.shape()
                ),
            ));
        }
        let mut tanh_cache = vec![0.0; da * n1 * n2];
        let mut scores = vec![0.0; n1 * n2];
        for i in 0..n1 {
            for j in 0..n2 {
                let mut s = 0.0;
                let base = (i * n2 + j) * da;
                for a in 0..da {
                    let t = (tp.at2(a, i) + tq.at2(a, j)).tanh();
                    tanh_cache[base + a] = t;
                    s += tv.data()[a] * t;
                }
                scores[i * n2 + j] = s;
            }
        }
        let value = Tensor::new(vec![n1, n2], scores)?;
        let needs = self.needs(proj1) || self.needs(proj2) || self.needs(v);
        Ok(self.push(
            Op::BahdanauScores {
                proj1,
                proj2,
                v,
                tanh_cache,
            },
            value,
            needs,
        ))
    }

    /// Weighted concordance loss over a `[T, P]` prediction against a fixed
    /// target, with per-parameter weights and a per-frame keep-mask. The
    /// gradient w.r.t. the prediction is computed in closed form up front.
    pub fn ccc_loss(
        &mut self,
        pred: NodeId,
        target: &Tensor,
        weights: &[f64],
        mask: &[bool],
    ) -> Result<NodeId> {
        let tp = &self.nodes[pred].value;
        let (value, grad_pred) = ccc_loss_forward(tp, target, weights, mask)?;
        let needs = self.needs(pred);
        Ok(self.push(
            Op::CccLoss { pred, grad_pred },
            Tensor::scalar(value),
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// leaf with `requires_grad`; intermediate gradients are freed as they
    /// are consumed.
    pub fn grad(&self, loss: NodeId) -> Result<Gradients> {
        let t = &self.nodes[loss].value;
        if !t.is_scalar() {
            return Err(Error::contract(
                "grad",
                format!("loss must be scalar, got shape {:?}", t.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gout, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(gout);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: NodeId, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_mapped(*a, grads, gout, |g, _| g);
                self.acc_mapped(*b, grads, gout, |g, _| g);
            }
            Op::Sub(a, b) => {
                self.acc_mapped(*a, grads, gout, |g, _| g);
                self.acc_mapped(*b, grads, gout, |g, _| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.clone(), &self.nodes[*b].value);
                self.acc_with(*a, grads, |buf| {
                    for ((dst, &g), &y) in buf.iter_mut().zip(gout.data()).zip(vb.data()) {
                        *dst += g * y;
                    }
                });
                self.acc_with(*b, grads, |buf| {
                    for ((dst, &g), &x) in buf.iter_mut().zip(gout.data()).zip(va.data()) {
                        *dst += g * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                let f = *factor;
                self.acc_mapped(*a, grads, gout, move |g, _| g * f);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc_with(*a, grads, |buf| {
                    for ((dst, &g), &t) in buf.iter_mut().zip(gout.data()).zip(y) {
                        *dst += g * (1.0 - t * t);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc_with(*a, grads, |buf| {
                    for ((dst, &g), &s) in buf.iter_mut().zip(gout.data()).zip(y) {
                        *dst += g * s * (1.0 - s);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (va.rows(), if va.shape().len() == 1 { 1 } else { va.cols() });
                let n = if vb.shape().len() == 1 { 1 } else { vb.cols() };
                if self.needs(*a) {
                    let buf = self.grad_buf(*a, grads);
                    gemm(m, n, k, 1.0, gout.data(), false, vb.data(), true, 1.0, buf);
                }
                if self.needs(*b) {
                    let buf = self.grad_buf(*b, grads);
                    gemm(k, m, n, 1.0, va.data(), true, gout.data(), false, 1.0, buf);
                }
            }
            Op::AddBiasCol(a, bias) => {
                self.acc_mapped(*a, grads, gout, |g, _| g);
                let (m, n) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                self.acc_with(*bias, grads, |buf| {
                    for i in 0..m {
                        buf[i] += gout.data()[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::Softmax { input, axis, mask } => {
                let y = node.value.data();
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let _ = mask;
                let (lines, line_len) = match axis {
                    SoftmaxAxis::Rows => (rows, cols),
                    SoftmaxAxis::Cols => (cols, rows),
                };
                self.acc_with(*input, grads, |buf| {
                    for line in 0..lines {
                        let at = |p: usize| match axis {
                            SoftmaxAxis::Rows => line * cols + p,
                            SoftmaxAxis::Cols => p * cols + line,
                        };
                        let mut dot = 0.0;
                        for p in 0..line_len {
                            let ix = at(p);
                            dot += gout.data()[ix] * y[ix];
                        }
                        for p in 0..line_len {
                            let ix = at(p);
                            buf[ix] += y[ix] * (gout.data()[ix] - dot);
                        }
                    }
                });
            }
            Op::Conv2d { input, weight, stride } => {
                self.backward_conv2d(*input, *weight, *stride, gout, grads);
            }
            Op::LstmStep {
                x,
                h,
                c,
                w_x,
                w_h,
                bias,
                gates,
            } => {
                self.backward_lstm(*x, *h, *c, *w_x, *w_h, *bias, gates, gout, grads);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = if self.nodes[p].value.shape().len() == 1 {
                        1
                    } else {
                        self.nodes[p].value.cols()
                    };
                    if self.needs(p) {
                        let start = off;
                        self.acc_with(p, grads, |buf| {
                            for r in 0..m {
                                for ci in 0..w {
                                    buf[r * w + ci] += gout.data()[r * n + start + ci];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::SliceCols { input, lo, hi } => {
                let (m, n) = row_dims("slice_cols", &self.nodes[*input].value).unwrap();
                let w = hi - lo;
                let lo = *lo;
                self.acc_with(*input, grads, |buf| {
                    for r in 0..m {
                        for ci in 0..w {
                            buf[r * n + lo + ci] += gout.data()[r * w + ci];
                        }
                    }
                });
            }
            Op::FlattenToCols(input) => {
                let b = self.nodes[*input].value.shape()[0];
                let d: usize = self.nodes[*input].value.shape()[1..].iter().product();
                self.acc_with(*input, grads, |buf| {
                    for bi in 0..b {
                        for r in 0..d {
                            buf[bi * d + r] += gout.data()[r * b + bi];
                        }
                    }
                });
            }
            Op::Sum(input) => {
                let g = gout.item();
                self.acc_mapped(*input, grads, gout, move |_, _| g);
            }
            Op::Mean(input) => {
                let g = gout.item() / self.nodes[*input].value.len() as f64;
                self.acc_mapped(*input, grads, gout, move |_, _| g);
            }
            Op::Correlation { h1, h2, d_h1, d_h2, .. } => {
                let g = gout.item();
                self.acc_with(*h1, grads, |buf| {
                    for (dst, &d) in buf.iter_mut().zip(d_h1.data()) {
                        *dst += g * d;
                    }
                });
                self.acc_with(*h2, grads, |buf| {
                    for (dst, &d) in buf.iter_mut().zip(d_h2.data()) {
                        *dst += g * d;
                    }
                });
            }
            Op::BahdanauScores {
                proj1,
                proj2,
                v,
                tanh_cache,
            } => {
                let (n1, n2) = (node.value.rows(), node.value.cols());
                let da = self.nodes[*v].value.len();
                let vv = self.nodes[*v].value.data().to_vec();
                if self.needs(*v) {
                    self.acc_with(*v, grads, |buf| {
                        for i in 0..n1 {
                            for j in 0..n2 {
                                let g = gout.data()[i * n2 + j];
                                let base = (i * n2 + j) * da;
                                for (a, dst) in buf.iter_mut().enumerate() {
                                    *dst += g * tanh_cache[base + a];
                                }
                            }
                        }
                    });
                }
                if self.needs(*proj1) {
                    self.acc_with(*proj1, grads, |buf| {
                        for i in 0..n1 {
                            for j in 0..n2 {
                                let g = gout.data()[i * n2 + j];
                                let base = (i * n2 + j) * da;
                                for a in 0..da {
                                    let t = tanh_cache[base + a];
                                    buf[a * n1 + i] += g * vv[a] * (1.0 - t * t);
                                }
                            }
                        }
                    });
                }
                if self.needs(*proj2) {
                    self.acc_with(*proj2, grads, |buf| {
                        for i in 0..n1 {
                            for j in 0..n2 {
                                let g = gout.data()[i * n2 + j];
                                let base = (i * n2 + j) * da;
                                for a in 0..da {
                                    let t = tanh_cache[base + a];
                                    buf[a * n2 + j] += g * vv[a] * (1.0 - t * t);
                                }
                            }
                        }
                    });
                }
            }
            Op::CccLoss { pred, grad_pred } => {
                let g = gout.item();
                self.acc_with(*pred, grads, |buf| {
                    for (dst, &d) in buf.iter_mut().zip(grad_pred.data()) {
                        *dst += g * d;
                    }
                });
            }
        }
    }

    fn backward_conv2d(
        &self,
        input: NodeId,
        weight: NodeId,
        stride: (usize, usize),
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let ti = &self.nodes[input].value;
        let tw = &self.nodes[weight].value;
        let (b, c, h, w) = (ti.shape()[0], ti.shape()[1], ti.shape()[2], ti.shape()[3]);
        let (f, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
        let (sh, sw) = stride;
        let (oh, ow) = (gout.shape()[2], gout.shape()[3]);
        let k = c * kh * kw;
        let n = oh * ow;
        let mut col = vec![0.0; k * n];
        let need_w = self.needs(weight);
        let need_i = self.needs(input);
        let mut dcol = if need_i { vec![0.0; k * n] } else { Vec::new() };
        for bi in 0..b {
            let gslice = &gout.data()[bi * f * n..(bi + 1) * f * n];
            if need_w {
                let frame = &ti.data()[bi * c * h * w..(bi + 1) * c * h * w];
                im2col(frame, c, h, w, kh, kw, sh, sw, oh, ow, &mut col);
                let buf = self.grad_buf(weight, grads);
                gemm(f, n, k, 1.0, gslice, false, &col, true, 1.0, buf);
            }
            if need_i {
                gemm(k, f, n, 1.0, tw.data(), true, gslice, false, 0.0, &mut dcol);
                let buf = self.grad_buf(input, grads);
                col2im_acc(
                    &dcol,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    sh,
                    sw,
                    oh,
                    ow,
                    &mut buf[bi * c * h * w..(bi + 1) * c * h * w],
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_lstm(
        &self,
        x: NodeId,
        h: NodeId,
        c: NodeId,
        w_x: NodeId,
        w_h: NodeId,
        bias: NodeId,
        gates: &LstmCache,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let dim_h = gates.i.len();
        let dh = &gout.data()[..dim_h];
        let dc_up = &gout.data()[dim_h..];
        let c_prev = self.nodes[c].value.data();
        let mut dz = vec![0.0; 4 * dim_h];
        let mut dc_prev = vec![0.0; dim_h];
        for t in 0..dim_h {
            let (i, f, g, o, tc) = (gates.i[t], gates.f[t], gates.g[t], gates.o[t], gates.tc[t]);
            let d_o = dh[t] * tc;
            let dc_total = dc_up[t] + dh[t] * o * (1.0 - tc * tc);
            dz[t] = dc_total * g * i * (1.0 - i);
            dz[dim_h + t] = dc_total * c_prev[t] * f * (1.0 - f);
            dz[2 * dim_h + t] = dc_total * i * (1.0 - g * g);
            dz[3 * dim_h + t] = d_o * o * (1.0 - o);
            dc_prev[t] = dc_total * f;
        }
        let dim_in = self.nodes[x].value.len();
        if self.needs(x) {
            let buf = self.grad_buf(x, grads);
            gemm(
                dim_in,
                4 * dim_h,
                1,
                1.0,
                self.nodes[w_x].value.data(),
                true,
                &dz,
                false,
                1.0,
                buf,
            );
        }
        if self.needs(h) {
            let buf = self.grad_buf(h, grads);
            gemm(
                dim_h,
                4 * dim_h,
                1,
                1.0,
                self.nodes[w_h].value.data(),
                true,
                &dz,
                false,
                1.0,
                buf,
            );
        }
        if self.needs(c) {
            self.acc_with(c, grads, |buf| {
                for (dst, &d) in buf.iter_mut().zip(&dc_prev) {
                    *dst += d;
                }
            });
        }
        if self.needs(w_x) {
            let xv = self.nodes[x].value.data();
            let buf = self.grad_buf(w_x, grads);
            gemm(4 * dim_h, 1, dim_in, 1.0, &dz, false, xv, false, 1.0, buf);
        }
        if self.needs(w_h) {
            let hv = self.nodes[h].value.data();
            let buf = self.grad_buf(w_h, grads);
            gemm(4 * dim_h, 1, dim_h, 1.0, &dz, false, hv, false, 1.0, buf);
        }
        if self.needs(bias) {
            self.acc_with(bias, grads, |buf| {
                for (dst, &d) in buf.iter_mut().zip(&dz) {
                    *dst += d;
                }
            });
        }
    }

    /// Get-or-create the gradient buffer for `id`.
    fn grad_buf<'g>(&self, id: NodeId, grads: &'g mut [Option<Tensor>]) -> &'g mut [f64] {
        if grads[id].is_none() {
            grads[id] = Some(Tensor::zeros(self.nodes[id].value.shape().to_vec()));
        }
        grads[id].as_mut().unwrap().data_mut()
    }

    fn acc_with(&self, id: NodeId, grads: &mut [Option<Tensor>], f: impl FnOnce(&mut [f64])) {
        if self.needs(id) {
            f(self.grad_buf(id, grads));
        }
    }

    /// Accumulate `f(gout[k], k)` into the gradient of `id` elementwise.
    fn acc_mapped(
        &self,
        id: NodeId,
        grads: &mut [Option<Tensor>],
        gout: &Tensor,
        f: impl Fn(f64, usize) -> f64,
    ) {
        self.acc_with(id, grads, |buf| {
            for (k, (dst, &g)) in buf.iter_mut().zip(gout.data()).enumerate() {
                *dst += f(g, k);
            }
        });
    }
}

/// 2D dims with vectors read as single columns (matmul convention).
fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 => Ok((t.shape()[0], 1)),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::contract(
            op,
            format!("want vector or matrix, got shape {:?}", t.shape()),
        )),
    }
}

/// 2D dims with vectors read as single rows (slicing convention).
fn row_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 => Ok((1, t.shape()[0])),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::contract(
            op,
            format!("want vector or matrix, got shape {:?}", t.shape()),
        )),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Concordance loss forward pass with its closed-form prediction gradient.
///
/// For each parameter column the concordance correlation uses population
/// moments over the unmasked frames; degenerate columns follow the fixed
/// conventions: both series constant and equal gives rho = 1, both constant
/// and unequal gives rho = 0, with zero gradient either way.
fn ccc_loss_forward(
    pred: &Tensor,
    target: &Tensor,
    weights: &[f64],
    mask: &[bool],
) -> Result<(f64, Tensor)> {
    if pred.shape().len() != 2 || !pred.same_shape(target) {
        return Err(Error::contract(
            "ccc_loss",
            format!(
                "pred {:?} and target {:?} must be equal 2D shapes",
                pred.shape(),
                target.shape()
            ),
        ));
    }
    let (frames, params) = (pred.rows(), pred.cols());
    if weights.len() != params {
        return Err(Error::contract(
            "ccc_loss",
            format!("{} weights for {params} parameters", weights.len()),
        ));
    }
    if mask.len() != frames {
        return Err(Error::contract(
            "ccc_loss",
            format!("mask length {} != {frames} frames", mask.len()),
        ));
    }
    let kept: Vec<usize> = (0..frames).filter(|&t| mask[t]).collect();
    if kept.is_empty() {
        return Err(Error::contract("ccc_loss", "all frames masked".to_string()));
    }
    let tn = kept.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(vec![frames, params]);
    for p in 0..params {
        let mut mx = 0.0;
        let mut my = 0.0;
        for &t in &kept {
            mx += pred.at2(t, p);
            my += target.at2(t, p);
        }
        mx /= tn;
        my /= tn;
        let mut vx = 0.0;
        let mut vy = 0.0;
        let mut cxy = 0.0;
        for &t in &kept {
            let dx = pred.at2(t, p) - mx;
            let dy = target.at2(t, p) - my;
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
        vx /= tn;
        vy /= tn;
        cxy /= tn;
        let md = mx - my;
        let denom = vx + vy + md * md;
        let rho = if denom == 0.0 {
            1.0 // both constant, equal
        } else {
            2.0 * cxy / denom
        };
        loss += weights[p] * (1.0 - rho);
        if denom > 0.0 {
            // d rho / d pred[t]  =  [2 dy/T * denom - 2 cxy * (2 dx/T + 2 md/T)] / denom^2
            let w = weights[p];
            for &t in &kept {
                let dx = pred.at2(t, p) - mx;
                let dy = target.at2(t, p) - my;
                let drho = (2.0 * dy / tn * denom - 2.0 * cxy * (2.0 * dx / tn + 2.0 * md / tn))
                    / (denom * denom);
                grad.set2(t, p, -w * drho);
            }
        }
    }
    Ok((loss, grad))
}

/// Standalone concordance correlation coefficient over two series
/// (population moments).
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::contract(
            "ccc",
            format!("series lengths {} and {} (need equal, >= 2)", x.len(), y.len()),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cxy /= n;
    let md = mx - my;
    let denom = vx + vy + md * md;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cxy / denom)
}
