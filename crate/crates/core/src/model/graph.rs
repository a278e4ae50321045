//! A small tape-based reverse-mode differentiation core.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Operators are coarse (linear, convolution,
//! attention, normalisation) and each carries its own hand-written adjoint.
//! Feature maps are channels-last: `[batch, height, width, channels]`, which
//! makes 1x1 convolutions and per-position projections plain [`Graph::linear`]
//! calls.

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} vs {} values", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![v; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * c_strides.0 + j * c_strides.1] *= beta;
            }
        }
        return;
    }
    debug_assert!((m - 1) * a_strides.0 + (k - 1) * a_strides.1 < a.len());
    debug_assert!((k - 1) * b_strides.0 + (n - 1) * b_strides.1 < b.len());
    debug_assert!((m - 1) * c_strides.0 + (n - 1) * c_strides.1 < c.len());
    // SAFETY: the asserted extents keep every strided access inside the
    // slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Geometry of a square-kernel, equal-stride, zero-padded convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds patch element.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let k = self.kernel;
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let base = ((b * self.height + iy as usize) * self.width + ix as usize) * self.c_in;
                            let col = (ky * k + kx) * self.c_in;
                            f(row, col, base);
                        }
                    }
                }
            }
        }
    }
}

/// Where the sequences of an attention operator live inside its packed
/// `[q | k | v]` input and its output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    /// Offset of position 0 of each sequence in the input.
    pub in_bases: Vec<usize>,
    /// Offset of position 0 of each sequence in the output.
    pub out_bases: Vec<usize>,
    pub len: usize,
    pub in_step: usize,
    pub out_step: usize,
    /// Model width `C`; input rows hold `3C` values.
    pub dim: usize,
    pub heads: usize,
}

impl AttnLayout {
    /// `batch` independent sequences of `len` rows each.
    pub fn sequences(batch: usize, len: usize, dim: usize, heads: usize) -> Self {
        Self {
            in_bases: (0..batch).map(|b| b * len * 3 * dim).collect(),
            out_bases: (0..batch).map(|b| b * len * dim).collect(),
            len,
            in_step: 3 * dim,
            out_step: dim,
            dim,
            heads,
        }
    }

    /// Attention along the height axis of a `[batch, h, w, 3C]` map: one
    /// sequence per (batch, column).
    pub fn along_height(batch: usize, h: usize, w: usize, dim: usize, heads: usize) -> Self {
        let mut in_bases = Vec::with_capacity(batch * w);
        let mut out_bases = Vec::with_capacity(batch * w);
        for b in 0..batch {
            for x in 0..w {
                in_bases.push((b * h * w + x) * 3 * dim);
                out_bases.push((b * h * w + x) * dim);
            }
        }
        Self {
            in_bases,
            out_bases,
            len: h,
            in_step: w * 3 * dim,
            out_step: w * dim,
            dim,
            heads,
        }
    }

    /// Attention along the width axis: one sequence per (batch, row).
    pub fn along_width(batch: usize, h: usize, w: usize, dim: usize, heads: usize) -> Self {
        let mut layout = Self::sequences(batch * h, w, dim, heads);
        layout.len = w;
        layout
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

enum Op {
    Input,
    Param(usize),
    Reshape(Var),
    Add(Var, Var),
    Gelu(Var),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Vec<f64>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        batch_stats: bool,
    },
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    MeanPool {
        x: Var,
        positions: usize,
    },
    Attention {
        qkv: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    /// Parameter indices of the running mean and variance this layer tracks.
    pub running: (usize, usize),
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const NORM_EPS: f64 = 1e-5;
/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    batch_stats: Vec<BatchStats>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Parameter `index` with the given current value.
    pub fn param(&mut self, index: usize, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(index))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let mut t = self.value(x).clone();
        assert_eq!(shape.iter().product::<usize>(), t.len(), "reshape {:?} -> {shape:?}", t.shape);
        t.shape = shape;
        self.push(t, Op::Reshape(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add {:?} + {:?}", ta.shape, tb.shape);
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape.clone(), data);
        self.push(t, Op::Add(a, b))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| gelu(v)).collect());
        self.push(t, Op::Gelu(x))
    }

    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.len(), mask.len());
        let t = Tensor::new(tx.shape.clone(), tx.data.iter().zip(&mask).map(|(a, m)| a * m).collect());
        self.push(t, Op::MulConst(x, mask))
    }

    /// `x @ w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let d_in = tx.last_dim();
        assert_eq!(tw.shape.len(), 2);
        assert_eq!(tw.shape[0], d_in, "linear: input width {d_in}, weight {:?}", tw.shape);
        let d_out = tw.shape[1];
        let rows = tx.len() / d_in;
        let mut out = vec![0.0; rows * d_out];
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.len(), d_out);
            for r in 0..rows {
                out[r * d_out..(r + 1) * d_out].copy_from_slice(&tb.data);
            }
        }
        gemm(rows, d_in, d_out, &tx.data, (d_in, 1), &tw.data, (d_out, 1), 1.0, &mut out, (d_out, 1));
        let mut shape = tx.shape.clone();
        *shape.last_mut().unwrap() = d_out;
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b })
    }

    /// Convolution of a `[B, H, W, Cin]` map with a `[k, k, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tx.shape.len(), 4, "conv2d input must be [B, H, W, C]");
        assert_eq!(tw.shape.len(), 4, "conv2d kernel must be [k, k, Cin, Cout]");
        let kernel = tw.shape[0];
        let geom = ConvGeom {
            batch: tx.shape[0],
            height: tx.shape[1],
            width: tx.shape[2],
            c_in: tx.shape[3],
            c_out: tw.shape[3],
            kernel,
            stride,
            pad: kernel / 2,
        };
        assert_eq!(tw.shape[2], geom.c_in);
        let (rows, plen) = (geom.rows(), geom.patch_len());
        let mut cols = vec![0.0; rows * plen];
        let c_in = geom.c_in;
        geom.for_each_tap(|row, col, base| {
            cols[row * plen + col..row * plen + col + c_in].copy_from_slice(&tx.data[base..base + c_in]);
        });
        let tb = self.value(b);
        let mut out = vec![0.0; rows * geom.c_out];
        for r in 0..rows {
            out[r * geom.c_out..(r + 1) * geom.c_out].copy_from_slice(&tb.data);
        }
        gemm(rows, plen, geom.c_out, &cols, (plen, 1), &tw.data, (geom.c_out, 1), 1.0, &mut out, (geom.c_out, 1));
        let shape = vec![geom.batch, geom.out_height(), geom.out_width(), geom.c_out];
        self.push(Tensor::new(shape, out), Op::Conv { x, w, b, geom, cols })
    }

    /// Normalises each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let rows = tx.len() / d;
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * g[i] + bt[i];
            }
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Per-channel normalisation of a channels-last tensor without affine
    /// terms. With `running = None` the batch statistics are used and
    /// recorded for the caller; otherwise the given running mean and variance.
    pub fn batch_norm(&mut self, x: Var, running_index: (usize, usize), running: Option<(&[f64], &[f64])>) -> Var {
        let tx = self.value(x);
        let c = tx.last_dim();
        let rows = tx.len() / c;
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&tx.data[r * c..(r + 1) * c]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(&tx.data[r * c..(r + 1) * c]).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; tx.len()];
        for r in 0..rows {
            for i in 0..c {
                xhat[r * c + i] = (tx.data[r * c + i] - mean[i]) * rstd[i];
            }
        }
        let t = Tensor::new(tx.shape.clone(), xhat.clone());
        let batch_stats = running.is_none();
        if batch_stats {
            self.batch_stats.push(BatchStats {
                running: running_index,
                mean,
                var,
            });
        }
        self.push(t, Op::BatchNorm { x, xhat, rstd, batch_stats })
    }

    /// `y[b, s, c] = x[b, s, c] * scale[b, c] + shift[b, c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (tx, ts, tb) = (self.value(x), self.value(scale), self.value(shift));
        let c = tx.last_dim();
        let batch = tx.shape[0];
        assert_eq!(ts.shape, vec![batch, c]);
        assert_eq!(tb.shape, vec![batch, c]);
        let per = tx.len() / (batch * c);
        let mut out = vec![0.0; tx.len()];
        for b in 0..batch {
            for s in 0..per {
                let o = (b * per + s) * c;
                for i in 0..c {
                    out[o + i] = tx.data[o + i] * ts.data[b * c + i] + tb.data[b * c + i];
                }
            }
        }
        let t = Tensor::new(tx.shape.clone(), out);
        self.push(t, Op::ChannelAffine { x, scale, shift })
    }

    /// Mean over every axis between the first and the last: `[B, ..., C] -> [B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (batch, c) = (tx.shape[0], tx.last_dim());
        let positions = tx.len() / (batch * c);
        let mut out = vec![0.0; batch * c];
        for b in 0..batch {
            for s in 0..positions {
                let o = (b * positions + s) * c;
                for i in 0..c {
                    out[b * c + i] += tx.data[o + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= positions as f64);
        self.push(Tensor::new(vec![batch, c], out), Op::MeanPool { x, positions })
    }

    /// Multi-head scaled dot-product self-attention over the sequences
    /// described by `layout`. The output keeps the input's leading shape with
    /// the last axis reduced from `3C` to `C`.
    pub fn attention(&mut self, qkv: Var, layout: AttnLayout) -> Var {
        let tq = self.value(qkv);
        assert_eq!(tq.last_dim(), 3 * layout.dim, "attention expects packed [q|k|v]");
        assert_eq!(layout.dim % layout.heads, 0);
        let (len, dh, c) = (layout.len, layout.head_dim(), layout.dim);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; tq.len() / 3];
        let mut probs = vec![0.0; layout.in_bases.len() * layout.heads * len * len];
        let x = &tq.data;
        let st = layout.in_step;
        for (g, (&ib, &ob)) in layout.in_bases.iter().zip(&layout.out_bases).enumerate() {
            for h in 0..layout.heads {
                let p = &mut probs[(g * layout.heads + h) * len * len..][..len * len];
                let (qo, ko, vo) = (ib + h * dh, ib + c + h * dh, ib + 2 * c + h * dh);
                // S = Q K^T, read in place through strides.
                gemm(len, dh, len, &x[qo..], (st, 1), &x[ko..], (1, st), 0.0, p, (len, 1));
                for row in p.chunks_mut(len) {
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) * scale;
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v * scale - max).exp();
                        sum += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= sum);
                }
                gemm(len, len, dh, p, (len, 1), &x[vo..], (st, 1), 0.0, &mut out[ob + h * dh..], (layout.out_step, 1));
            }
        }
        let mut shape = tq.shape.clone();
        *shape.last_mut().unwrap() = c;
        self.push(Tensor::new(shape, out), Op::Attention { qkv, layout, probs })
    }

    /// Attention weights of an attention node: `[sequence, head, i, j]` flattened.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over rows of `-ln(max(p[target], PROB_FLOOR))` with `p = softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = self.value(logits);
        let k = tl.last_dim();
        let rows = tl.len() / k;
        assert_eq!(rows, targets.len());
        let mut probs = vec![0.0; tl.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let z = &tl.data[r * k..(r + 1) * k];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * k..(r + 1) * k];
            let mut sum = 0.0;
            for (pi, zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                sum += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= sum);
            loss -= p[targets[r]].max(PROB_FLOOR).ln();
        }
        loss /= rows as f64;
        self.push(
            Tensor::new(vec![1], vec![loss]),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar `root`. Returns the gradient of every
    /// parameter node, keyed by parameter index (`None` when untouched).
    pub fn backward(&self, root: Var, n_params: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let root_value = &self.value(root).data;
        if root_value.len() != 1 {
            return Err(Error::Shape(format!("backward root has {} elements", root_value.len())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        let mut param_grads: Vec<Option<Vec<f64>>> = vec![None; n_params];

        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(&mut param_grads[*p], &dy, self.nodes[idx].value.len()),
                Op::Reshape(x) => accumulate(&mut grads[x.0], &dy, dy.len()),
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &dy, dy.len());
                    accumulate(&mut grads[b.0], &dy, dy.len());
                }
                Op::Gelu(x) => {
                    let xv = &self.value(*x).data;
                    let dx: Vec<f64> = dy.iter().zip(xv).map(|(g, &v)| g * gelu_grad(v)).collect();
                    accumulate(&mut grads[x.0], &dx, dx.len());
                }
                Op::MulConst(x, mask) => {
                    let dx: Vec<f64> = dy.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads[x.0], &dx, dx.len());
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (self.value(*x), self.value(*w));
                    let (d_in, d_out) = (tw.shape[0], tw.shape[1]);
                    let rows = tx.len() / d_in;
                    let gx = grad_slot(&mut grads[x.0], tx.len());
                    gemm(rows, d_out, d_in, &dy, (d_out, 1), &tw.data, (1, d_out), 1.0, gx, (d_in, 1));
                    let gw = grad_slot(&mut grads[w.0], tw.len());
                    gemm(d_in, rows, d_out, &tx.data, (1, d_in), &dy, (d_out, 1), 1.0, gw, (d_out, 1));
                    if let Some(b) = b {
                        let gb = grad_slot(&mut grads[b.0], d_out);
                        for r in 0..rows {
                            for (g, d) in gb.iter_mut().zip(&dy[r * d_out..(r + 1) * d_out]) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let (rows, plen, c_out) = (geom.rows(), geom.patch_len(), geom.c_out);
                    let tw = self.value(*w);
                    let gw = grad_slot(&mut grads[w.0], tw.len());
                    gemm(plen, rows, c_out, cols, (1, plen), &dy, (c_out, 1), 1.0, gw, (c_out, 1));
                    let gb = grad_slot(&mut grads[b.0], c_out);
                    for r in 0..rows {
                        for (g, d) in gb.iter_mut().zip(&dy[r * c_out..(r + 1) * c_out]) {
                            *g += d;
                        }
                    }
                    let mut dcols = vec![0.0; rows * plen];
                    gemm(rows, c_out, plen, &dy, (c_out, 1), &tw.data, (1, c_out), 0.0, &mut dcols, (plen, 1));
                    let gx = grad_slot(&mut grads[x.0], self.value(*x).len());
                    let c_in = geom.c_in;
                    geom.for_each_tap(|row, col, base| {
                        for (g, d) in gx[base..base + c_in].iter_mut().zip(&dcols[row * plen + col..][..c_in]) {
                            *g += d;
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let g = &self.value(*gamma).data;
                    let d = g.len();
                    let rows = dy.len() / d;
                    let mut dx = vec![0.0; dy.len()];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        let (dyr, xh) = (&dy[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for i in 0..d {
                            let dxh = dyr[i] * g[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[i];
                            dg[i] += dyr[i] * xh[i];
                            db[i] += dyr[i];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for i in 0..d {
                            dx[r * d + i] = rstd[r] * (dyr[i] * g[i] - mean_dxh - xh[i] * mean_dxh_xh);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx, dx.len());
                    accumulate(&mut grads[gamma.0], &dg, d);
                    accumulate(&mut grads[beta.0], &db, d);
                }
                Op::BatchNorm { x, xhat, rstd, batch_stats } => {
                    let c = rstd.len();
                    let rows = dy.len() / c;
                    let mut dx = vec![0.0; dy.len()];
                    if *batch_stats {
                        let mut mean_dy = vec![0.0; c];
                        let mut mean_dy_xh = vec![0.0; c];
                        for r in 0..rows {
                            for i in 0..c {
                                mean_dy[i] += dy[r * c + i];
                                mean_dy_xh[i] += dy[r * c + i] * xhat[r * c + i];
                            }
                        }
                        mean_dy.iter_mut().for_each(|v| *v /= rows as f64);
                        mean_dy_xh.iter_mut().for_each(|v| *v /= rows as f64);
                        for r in 0..rows {
                            for i in 0..c {
                                let j = r * c + i;
                                dx[j] = rstd[i] * (dy[j] - mean_dy[i] - xhat[j] * mean_dy_xh[i]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for i in 0..c {
                                dx[r * c + i] = dy[r * c + i] * rstd[i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &dx, dx.len());
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let (tx, ts) = (self.value(*x), self.value(*scale));
                    let c = tx.last_dim();
                    let batch = tx.shape[0];
                    let per = tx.len() / (batch * c);
                    let mut dx = vec![0.0; tx.len()];
                    let mut ds = vec![0.0; batch * c];
                    let mut db = vec![0.0; batch * c];
                    for b in 0..batch {
                        for s in 0..per {
                            let o = (b * per + s) * c;
                            for i in 0..c {
                                dx[o + i] = dy[o + i] * ts.data[b * c + i];
                                ds[b * c + i] += dy[o + i] * tx.data[o + i];
                                db[b * c + i] += dy[o + i];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], &dx, dx.len());
                    accumulate(&mut grads[scale.0], &ds, ds.len());
                    accumulate(&mut grads[shift.0], &db, db.len());
                }
                Op::MeanPool { x, positions } => {
                    let tx = self.value(*x);
                    let c = tx.last_dim();
                    let batch = tx.shape[0];
                    let gx = grad_slot(&mut grads[x.0], tx.len());
                    let inv = 1.0 / *positions as f64;
                    for b in 0..batch {
                        for s in 0..*positions {
                            let o = (b * positions + s) * c;
                            for i in 0..c {
                                gx[o + i] += dy[b * c + i] * inv;
                            }
                        }
                    }
                }
                Op::Attention { qkv, layout, probs } => {
                    let tq = self.value(*qkv);
                    let x = &tq.data;
                    let (len, dh, c) = (layout.len, layout.head_dim(), layout.dim);
                    let scale = 1.0 / (dh as f64).sqrt();
                    let gx = grad_slot(&mut grads[qkv.0], tq.len());
                    let (st, ost) = (layout.in_step, layout.out_step);
                    let mut ds = vec![0.0; len * len];
                    for (g, (&ib, &ob)) in layout.in_bases.iter().zip(&layout.out_bases).enumerate() {
                        for h in 0..layout.heads {
                            let p = &probs[(g * layout.heads + h) * len * len..][..len * len];
                            let (qo, ko, vo) = (ib + h * dh, ib + c + h * dh, ib + 2 * c + h * dh);
                            let dout = &dy[ob + h * dh..];
                            // dV += P^T dO, dP = dO V^T.
                            gemm(len, len, dh, p, (1, len), dout, (ost, 1), 1.0, &mut gx[vo..], (st, 1));
                            gemm(len, dh, len, dout, (ost, 1), &x[vo..], (1, st), 0.0, &mut ds, (len, 1));
                            // Softmax adjoint.
                            for (dsr, pr) in ds.chunks_mut(len).zip(p.chunks(len)) {
                                let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                                for (d, &pv) in dsr.iter_mut().zip(pr) {
                                    *d = pv * (*d - dot) * scale;
                                }
                            }
                            // dQ += dS K, dK += dS^T Q.
                            gemm(len, len, dh, &ds, (len, 1), &x[ko..], (st, 1), 1.0, &mut gx[qo..], (st, 1));
                            gemm(len, len, dh, &ds, (1, len), &x[qo..], (st, 1), 1.0, &mut gx[ko..], (st, 1));
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                    let k = probs.len() / targets.len();
                    let rows = targets.len();
                    let gl = grad_slot(&mut grads[logits.0], probs.len());
                    let s = dy[0] / rows as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if probs[r * k + t] <= PROB_FLOOR {
                            continue;
                        }
                        for i in 0..k {
                            let onehot = if i == t { 1.0 } else { 0.0 };
                            gl[r * k + i] += s * (probs[r * k + i] - onehot);
                        }
                    }
                }
            }
        }
        Ok(param_grads)
    }
}

fn grad_slot(slot: &mut Option<Vec<f64>>, len: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64], len: usize) {
    debug_assert_eq!(g.len(), len);
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    /// Central-difference check of every parameter of a scalar function
    /// built by `build` from parameter values.
    fn check_grads(params: &mut [Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |params: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let root = build(&mut g, &vars);
            (g.value(root).data[0], g, root)
        };
        let (_, g, root) = eval(params);
        let grads = g.backward(root, params.len()).unwrap();
        let h = 1e-3;
        for p in 0..params.len() {
            for i in 0..params[p].len() {
                let orig = params[p].data[i];
                let mut at = |offset: f64| {
                    params[p].data[i] = orig + offset;
                    eval(params).0
                };
                let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                params[p].data[i] = orig;
                let an = grads[p].as_ref().map_or(0.0, |g| g[i]);
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-6, "param {p}[{i}]: analytic {an}, numeric {fd}");
            }
        }
    }

    fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
        // Random projection to a scalar through a linear layer.
        let n = g.value(x).len();
        let mut rng = SplitMix64::new(seed);
        let w = g.input(random(vec![n, 1], &mut rng));
        let flat = g.reshape(x, vec![1, n]);
        let y = g.linear(flat, w, None);
        g.reshape(y, vec![1])
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut rng = SplitMix64::new(1);
        let mut params = vec![
            random(vec![5, 4], &mut rng),
            random(vec![4, 3], &mut rng),
            random(vec![3], &mut rng),
            random(vec![3], &mut rng),
            random(vec![3], &mut rng),
        ];
        check_grads(&mut params, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]));
            let y = g.gelu(y);
            let y = g.layer_norm(y, v[3], v[4]);
            weighted_sum(g, y, 7)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = SplitMix64::new(2);
        let mut params = vec![
            random(vec![2, 5, 4, 2], &mut rng),
            random(vec![3, 3, 2, 3], &mut rng),
            random(vec![3], &mut rng),
        ];
        for stride in [1, 2] {
            check_grads(&mut params, |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride);
                weighted_sum(g, y, 3)
            });
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = SplitMix64::new(3);
        let x = random(vec![1, 4, 5, 2], &mut rng);
        let w = random(vec![3, 3, 2, 2], &mut rng);
        let b = random(vec![2], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2);
        let out = g.value(y).clone();
        assert_eq!(out.shape, vec![1, 2, 3, 2]);
        for oy in 0..2 {
            for ox in 0..3 {
                for co in 0..2 {
                    let mut s = b.data[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 4 || ix >= 5 {
                                continue;
                            }
                            for ci in 0..2 {
                                let xi = ((iy as usize) * 5 + ix as usize) * 2 + ci;
                                let wi = ((ky * 3 + kx) * 2 + ci) * 2 + co;
                                s += x.data[xi] * w.data[wi];
                            }
                        }
                    }
                    assert!((out.data[(oy * 3 + ox) * 2 + co] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_and_affine_gradients() {
        let mut rng = SplitMix64::new(4);
        let mut params = vec![
            random(vec![2, 3, 2, 3], &mut rng),
            random(vec![2, 3], &mut rng),
            random(vec![2, 3], &mut rng),
        ];
        check_grads(&mut params, |g, v| {
            let y = g.batch_norm(v[0], (0, 0), None);
            let y = g.channel_affine(y, v[1], v[2]);
            let y = g.mean_pool(y);
            weighted_sum(g, y, 5)
        });
        let running = (vec![0.1, -0.2, 0.3], vec![1.5, 0.5, 2.0]);
        check_grads(&mut params, |g, v| {
            let y = g.batch_norm(v[0], (0, 0), Some((&running.0, &running.1)));
            weighted_sum(g, y, 6)
        });
    }

    #[test]
    fn attention_gradients_all_layouts() {
        let mut rng = SplitMix64::new(5);
        let mut params = vec![random(vec![2, 3, 4, 12], &mut rng)];
        for which in 0..3 {
            check_grads(&mut params, |g, v| {
                let layout = match which {
                    0 => AttnLayout::sequences(2, 12, 4, 2),
                    1 => AttnLayout::along_height(2, 3, 4, 4, 2),
                    _ => AttnLayout::along_width(2, 3, 4, 4, 2),
                };
                let y = g.attention(v[0], layout);
                weighted_sum(g, y, 8)
            });
        }
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        let mut rng = SplitMix64::new(6);
        let mut params = vec![random(vec![3, 4], &mut rng)];
        check_grads(&mut params, |g, v| g.softmax_cross_entropy(v[0], &[0, 3, 1]));

        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(vec![1, 4]));
        let l = g.softmax_cross_entropy(z, &[2]);
        assert!((g.value(l).data[0] - 4f64.ln()).abs() < 1e-12);
    }

    /// Plain full self-attention over `n` packed rows, written out directly.
    fn naive_attention(x: &[f64], n: usize, c: usize, heads: usize) -> Vec<f64> {
        let dh = c / heads;
        let mut out = vec![0.0; n * c];
        for h in 0..heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|t| x[i * 3 * c + h * dh + t] * x[j * 3 * c + c + h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                s.iter_mut().for_each(|v| *v = (*v - m).exp());
                let z: f64 = s.iter().sum();
                for j in 0..n {
                    for t in 0..dh {
                        out[i * c + h * dh + t] += s[j] / z * x[j * 3 * c + 2 * c + h * dh + t];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn axial_attention_on_single_row_is_full_attention() {
        let mut rng = SplitMix64::new(9);
        let (w, c, heads) = (7, 4, 2);
        let x = random(vec![1, 1, w, 3 * c], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let along_w = g.attention(xv, AttnLayout::along_width(1, 1, w, c, heads));
        let oracle = naive_attention(&x.data, w, c, heads);
        for (a, b) in g.value(along_w).data.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // Along the singleton axis every position only sees itself: output = V.
        let along_h = g.attention(xv, AttnLayout::along_height(1, 1, w, c, heads));
        for p in 0..w {
            for t in 0..c {
                assert_eq!(g.value(along_h).data[p * c + t], x.data[p * 3 * c + 2 * c + t]);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = SplitMix64::new(10);
        let x = random(vec![2, 5, 3, 24], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(x);
        for layout in [
            AttnLayout::along_height(2, 5, 3, 8, 2),
            AttnLayout::along_width(2, 5, 3, 8, 2),
            AttnLayout::sequences(2, 15, 8, 4),
        ] {
            let len = layout.len;
            let y = g.attention(xv, layout);
            for row in g.attention_probs(y).unwrap().chunks(len) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
