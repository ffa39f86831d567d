use std::rc::Rc;

use super::{BoolMatrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    RepeatRows(Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowNorms(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SoftmaxMasked { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, pad: usize },
    AvgPool2(Var),
    Blur { x: Var, kernel: Rc<Vec<f64>> },
    Resize(Var),
    Crop { x: Var, y0: usize, x0: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records tensor operations in topological order and replays them backwards.
///
/// Node ids grow monotonically, so every record's inputs precede it and the
/// reverse sweep visits each record exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf (None until a backward pass reaches it).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(Tensor { shape, data }, op, rg)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank-2 operand, got {}", shape_str(s)))),
        }
    }

    fn dims3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            [c, h, w] => Ok((*c, *h, *w)),
            s => Err(Error::shape(op, format!("expected C×H×W operand, got {}", shape_str(s)))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: [{m}×{k}] · [{k2}×{n}]"),
            ));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.derived(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", shape_str(self.shape(a)), shape_str(shape)),
            ));
        }
        let data = self.value(a).data().to_vec();
        Ok(self.derived(shape.to_vec(), data, Op::Reshape(a), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let x = self.value(p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&x[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.derived(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(a, "slice_cols")?;
        if start + len > cols {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of {cols}", start + len),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&x[i * cols + start..i * cols + start + len]);
        }
        Ok(self.derived(vec![rows, len], out, Op::SliceCols { x: a, start }, &[a]))
    }

    /// Broadcast a length-n vector (or 1×n row) to `count` rows.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var> {
        let n = match self.shape(a) {
            [n] | [1, n] => *n,
            s => return Err(Error::shape("repeat_rows", format!("expected a row, got {}", shape_str(s)))),
        };
        let row = self.value(a).data().to_vec();
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(&row);
        }
        Ok(self.derived(vec![count, n], out, Op::RepeatRows(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(a, b, op)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.derived(shape, out, rec, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-n bias to every row of an `[.., n]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {} for rows of width {n}", shape_str(self.shape(bias))),
            ));
        }
        let b = self.value(bias).data();
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::AddRow(x, bias), &[x, bias]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, rec: Op) -> Var {
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, out, rec, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a).data();
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.derived(vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Sum over the last axis of a rank-2 tensor.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "sum_rows")?;
        let x = self.value(a).data();
        let out = (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.derived(vec![r], out, Op::SumRows(a), &[a]))
    }

    /// Euclidean norm of every row; the subgradient at a zero row is zero.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "row_norms")?;
        let x = self.value(a).data();
        let out = (0..r)
            .map(|i| x[i * c..(i + 1) * c].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.derived(vec![r], out, Op::RowNorms(a), &[a]))
    }

    // ---- attention ------------------------------------------------------

    /// Row softmax over the last axis with masked entries forced to exactly zero.
    ///
    /// `logits` has shape `[.., T, S]` and the mask is `T×S`; the same mask applies to
    /// every leading batch slice.
    pub fn softmax_masked(&mut self, logits: Var, mask: &BoolMatrix) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("softmax_masked", format!("rank < 2: {}", shape_str(&shape))));
        }
        let (t, s) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if mask.rows() != t || mask.cols() != s {
            return Err(Error::shape(
                "softmax_masked",
                format!("mask {}×{} for logits {}", mask.rows(), mask.cols(), shape_str(&shape)),
            ));
        }
        for i in 0..t {
            if !(0..s).any(|j| mask.get(i, j)) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        let x = self.value(logits).data();
        let mut out = vec![0.0; x.len()];
        for (r, (row_in, row_out)) in x.chunks(s).zip(out.chunks_mut(s)).enumerate() {
            let qi = r % t;
            let mut m = f64::NEG_INFINITY;
            for j in 0..s {
                if mask.get(qi, j) {
                    m = m.max(row_in[j]);
                }
            }
            let mut z = 0.0;
            for j in 0..s {
                if mask.get(qi, j) {
                    let e = (row_in[j] - m).exp();
                    row_out[j] = e;
                    z += e;
                }
            }
            for v in row_out.iter_mut() {
                *v /= z;
            }
        }
        // masked outputs are exactly zero, so the backward needs no mask
        Ok(self.derived(shape, out, Op::SoftmaxMasked { x: logits }, &[logits]))
    }

    /// Layer normalisation over the last axis of a rank-2 tensor with affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", format!("affine parameters must have length {c}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mu) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.derived(
            vec![r, c],
            out,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    // ---- image operators (C×H×W) ----------------------------------------

    /// 2D cross-correlation with zero padding `pad`; weights `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (cin, h, wd) = self.dims3(x, "conv2d")?;
        let (cout, cin2, k, k2) = match self.shape(w) {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => return Err(Error::shape("conv2d", format!("weights must be rank 4, got {}", shape_str(s)))),
        };
        if cin != cin2 || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} vs weights {}", shape_str(self.shape(w))),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {h}×{wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", "bias length must equal output channels"));
            }
        }
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let bias = b.map_or(0.0, |b| self.value(b).data()[co]);
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bias);
            for ci in 0..cin {
                let xin = &xv[ci * h * wd..(ci + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            for ox in 0..wo {
                                let ix = ox + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                plane[oy * wo + ox] += wt * xin[iy * wd + ix - pad];
                            }
                        }
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.derived(vec![cout, ho, wo], out, Op::Conv2d { x, w, b, pad }, &inputs))
    }

    /// 2×2 average pooling (trailing odd row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "avg_pool2")?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("avg_pool2", format!("input {h}×{w} too small")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let base = ch * h * w;
                    let s = xv[base + 2 * y * w + 2 * xx]
                        + xv[base + 2 * y * w + 2 * xx + 1]
                        + xv[base + (2 * y + 1) * w + 2 * xx]
                        + xv[base + (2 * y + 1) * w + 2 * xx + 1];
                    out[ch * ho * wo + y * wo + xx] = 0.25 * s;
                }
            }
        }
        Ok(self.derived(vec![c, ho, wo], out, Op::AvgPool2(x), &[x]))
    }

    /// Separable blur with an odd-length kernel and mirror ("reflect") padding.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "blur")?;
        let r = kernel.len() / 2;
        if kernel.len().is_multiple_of(2) || h <= r || w <= r {
            return Err(Error::shape(
                "blur",
                format!("kernel of length {} on a {h}×{w} image", kernel.len()),
            ));
        }
        let out = blur_forward(self.value(x).data(), c, h, w, kernel);
        Ok(self.derived(
            vec![c, h, w],
            out,
            Op::Blur { x, kernel: Rc::new(kernel.to_vec()) },
            &[x],
        ))
    }

    /// Bilinear resampling (half-pixel centres, edge clamped). Identity when sizes agree.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize", "empty output"));
        }
        let ry = resample_weights(h, out_h);
        let rx = resample_weights(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let p = |yy: usize, xx: usize| xv[ch * h * w + yy * w + xx];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        Ok(self.derived(vec![c, out_h, out_w], out, Op::Resize(x), &[x]))
    }

    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let (c, ih, iw) = self.dims3(x, "crop")?;
        if y0 + h > ih || x0 + w > iw {
            return Err(Error::shape("crop", format!("window {h}×{w} at ({y0},{x0}) exceeds {ih}×{iw}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = ch * ih * iw + (y0 + y) * iw + x0;
                out.extend_from_slice(&xv[row..row + w]);
            }
        }
        Ok(self.derived(vec![c, h, w], out, Op::Crop { x, y0, x0 }, &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Reverse sweep seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return Err(Error::shape(
                "backward",
                format!("seed of length {} for node of {} values", seed.len(), self.value(out).numel()),
            ));
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed.to_vec());
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&contrib).for_each(|(x, c)| *x += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let unary = |a: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..val(a).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            da[i * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let grow = &g[i * n..(i + 1) * n];
                            let drow = &mut db[p * n..(p + 1) * n];
                            drow.iter_mut().zip(grow).for_each(|(d, gg)| *d += aip * gg);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                acc(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, g.iter().zip(bv).map(|(x, y)| x / y).collect());
                acc(
                    *b,
                    (0..g.len()).map(|i| -g[i] * av[i] / (bv[i] * bv[i])).collect(),
                );
            }
            Op::AddRow(x, bias) => {
                acc(*x, g.to_vec());
                let n = val(*bias).len();
                let mut db = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    db[i % n] += v;
                }
                acc(*bias, db);
            }
            Op::RepeatRows(a) => {
                let n = val(*a).len();
                let mut da = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    da[i % n] += v;
                }
                acc(*a, da);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddConst(a) => acc(*a, g.to_vec()),
            Op::Tanh(a) => acc(*a, unary(*a, &|i| g[i] * (1.0 - y[i] * y[i]))),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, unary(*a, &|i| if av[i] > 0.0 { g[i] } else { 0.0 }))
            }
            Op::Sigmoid(a) => acc(*a, unary(*a, &|i| g[i] * y[i] * (1.0 - y[i]))),
            Op::Exp(a) => acc(*a, unary(*a, &|i| g[i] * y[i])),
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, unary(*a, &|i| g[i] * sign(av[i])))
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, unary(*a, &|i| 2.0 * g[i] * av[i]))
            }
            Op::Sqrt(a) => acc(*a, unary(*a, &|i| if y[i] > 0.0 { 0.5 * g[i] / y[i] } else { 0.0 })),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(a) => {
                let c = self.shape(*a)[1];
                acc(*a, unary(*a, &|i| g[i / c]));
            }
            Op::RowNorms(a) => {
                let c = self.shape(*a)[1];
                let av = val(*a);
                acc(
                    *a,
                    unary(*a, &|i| {
                        let n = y[i / c];
                        if n > 0.0 {
                            g[i / c] * av[i] / n
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, da);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        dp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    acc(p, dp);
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = node.value.shape()[1];
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    dx[i * cols + start..i * cols + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::SoftmaxMasked { x } => {
                let s = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(s).zip(g.chunks(s)).zip(dx.chunks_mut(s)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..s {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gm = val(*gamma);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for i in 0..r {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..c {
                        let gi = g[i * c + j];
                        dg[j] += gi * xhat[i * c + j];
                        db[j] += gi;
                        let dh = gi * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[i * c + j];
                    }
                    mean_dh /= c as f64;
                    mean_dh_h /= c as f64;
                    for j in 0..c {
                        let dh = g[i * c + j] * gm[j];
                        dx[i * c + j] = rstd[i] * (dh - mean_dh - xhat[i * c + j] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (cin, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
                let xv = val(*x);
                let wv = val(*w);
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; wv.len()];
                for co in 0..cout {
                    let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let widx = ((co * cin + ci) * k + ky) * k + kx;
                                let wt = wv[widx];
                                let mut sw = 0.0;
                                for oy in 0..ho {
                                    let iy = oy + ky;
                                    if iy < *pad || iy - pad >= h {
                                        continue;
                                    }
                                    let iy = iy - pad;
                                    for ox in 0..wo {
                                        let ix = ox + kx;
                                        if ix < *pad || ix - pad >= wd {
                                            continue;
                                        }
                                        let xi = ci * h * wd + iy * wd + ix - pad;
                                        let go = gplane[oy * wo + ox];
                                        dx[xi] += wt * go;
                                        sw += xv[xi] * go;
                                    }
                                }
                                dw[widx] += sw;
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    let db = (0..cout).map(|co| g[co * ho * wo..(co + 1) * ho * wo].iter().sum()).collect();
                    acc(*b, db);
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            let gv = 0.25 * g[ch * ho * wo + yy * wo + xx];
                            let base = ch * h * w;
                            dx[base + 2 * yy * w + 2 * xx] += gv;
                            dx[base + 2 * yy * w + 2 * xx + 1] += gv;
                            dx[base + (2 * yy + 1) * w + 2 * xx] += gv;
                            dx[base + (2 * yy + 1) * w + 2 * xx + 1] += gv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Blur { x, kernel } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                acc(*x, blur_backward(g, c, h, w, kernel));
            }
            Op::Resize(x) => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let ry = resample_weights(h, oh);
                let rx = resample_weights(w, ow);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                            let gv = g[ch * oh * ow + oy * ow + ox];
                            let base = ch * h * w;
                            dx[base + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dx[base + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dx[base + y1 * w + x0] += gv * fy * (1.0 - fx);
                            dx[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Crop { x, y0, x0 } => {
                let (c, ih, iw) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (h, w) = (node.value.shape()[1], node.value.shape()[2]);
                let mut dx = vec![0.0; c * ih * iw];
                for ch in 0..c {
                    for yy in 0..h {
                        let row = ch * ih * iw + (y0 + yy) * iw + x0;
                        dx[row..row + w].copy_from_slice(&g[(ch * h + yy) * w..(ch * h + yy + 1) * w]);
                    }
                }
                acc(*x, dx);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += aip * bv);
        }
    }
    out
}

/// Mirror index without repeating the edge sample: `-1 -> 1`, `n -> n-2`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn blur_forward(x: &[f64], c: usize, h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; x.len()];
    for ch in 0..c {
        for yy in 0..h {
            let row = &x[ch * h * w + yy * w..ch * h * w + (yy + 1) * w];
            for xx in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * row[reflect(xx as isize + t as isize - r, w)];
                }
                tmp[ch * h * w + yy * w + xx] = s;
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for yy in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    s += kv * plane[reflect(yy as isize + t as isize - r, h) * w + xx];
                }
                out[ch * h * w + yy * w + xx] = s;
            }
        }
    }
    out
}

fn blur_backward(g: &[f64], c: usize, h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; g.len()];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let gv = g[ch * h * w + yy * w + xx];
                for (t, kv) in k.iter().enumerate() {
                    tmp[ch * h * w + reflect(yy as isize + t as isize - r, h) * w + xx] += kv * gv;
                }
            }
        }
    }
    let mut dx = vec![0.0; g.len()];
    for ch in 0..c {
        for yy in 0..h {
            for xx in 0..w {
                let gv = tmp[ch * h * w + yy * w + xx];
                for (t, kv) in k.iter().enumerate() {
                    dx[ch * h * w + yy * w + reflect(xx as isize + t as isize - r, w)] += kv * gv;
                }
            }
        }
    }
    dx
}

/// Source taps `(i0, i1, frac)` for each output sample of a bilinear resize.
fn resample_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Checks d(Σ w·op(x))/dx against central differences.
    fn check(shape: &[usize], seed: u64, lo: f64, build: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = rand_vec(&mut rng, n).iter().map(|v| v.abs().max(lo).copysign(*v)).collect();
        let eval = |x: &[f64], grad: bool| {
            let mut t = Tape::new();
            let xv = t.param(Tensor::new(shape.to_vec(), x.to_vec()).unwrap());
            let y = build(&mut t, xv);
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let w = rand_vec(&mut wr, t.value(y).numel());
            let wv = t.constant(Tensor::new(t.shape(y).to_vec(), w).unwrap());
            let p = t.mul(y, wv).unwrap();
            let l = t.sum(p);
            if grad {
                t.backward(l).unwrap();
                (t.value(l).item(), t.grad(xv).unwrap().to_vec())
            } else {
                (t.value(l).item(), vec![])
            }
        };
        let (_, analytic) = eval(&x0, true);
        let numeric = numeric_grad(|x| eval(x, false).0, &x0, 1e-5);
        rel_err(&analytic, &numeric)
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = t.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = t.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let c = t.constant(Tensor::new(vec![2, 1], vec![2.0, 5.0]).unwrap());
        let s = t.matmul(r, c).unwrap();
        assert_eq!(t.value(s).data(), &[2.0]);
        assert!(matches!(t.matmul(r, r), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_both_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = rand_vec(&mut rng, 12);
        let b0 = rand_vec(&mut rng, 8);
        let f = |a: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let av = t.param(Tensor::new(vec![3, 4], a.to_vec()).unwrap());
            let bv = t.param(Tensor::new(vec![4, 2], b.to_vec()).unwrap());
            let c = t.matmul(av, bv).unwrap();
            let sq = t.square(c);
            let l = t.sum(sq);
            t.backward(l).unwrap();
            (t.value(l).item(), t.grad(av).unwrap().to_vec(), t.grad(bv).unwrap().to_vec())
        };
        let (_, ga, gb) = f(&a0, &b0);
        let na = numeric_grad(|a| f(a, &b0).0, &a0, 1e-5);
        let nb = numeric_grad(|b| f(&a0, b).0, &b0, 1e-5);
        assert!(rel_err(&ga, &na) < 1e-6);
        assert!(rel_err(&gb, &nb) < 1e-6);
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let xx = t.mul(x, x).unwrap();
        let d = t.sum(xx);
        t.backward(d).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
        // accumulation without reset
        t.backward(d).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        assert!(matches!(t.backward(xx), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let p = t.mul(x, c).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[4, 4]));
        let s = t.softmax_masked(z, &BoolMatrix::full(4, 4)).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v == 0.25));
        let tri = BoolMatrix::from_fn(4, 4, |i, j| j <= i);
        let s = t.softmax_masked(z, &tri).unwrap();
        assert_eq!(&t.value(s).data()[..4], &[1.0, 0.0, 0.0, 0.0]);
        let dead = BoolMatrix::from_fn(4, 4, |i, _| i != 2);
        assert!(matches!(t.softmax_masked(z, &dead), Err(Error::FullyMaskedRow { row: 2 })));
    }

    #[test]
    fn softmax_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits = rand_vec(&mut rng, 2 * 5 * 5).iter().map(|v| v * 8.0).collect::<Vec<_>>();
            let mask = BoolMatrix::from_fn(5, 5, |i, j| j <= i || (i + j) % 3 == 0);
            let mut t = Tape::new();
            let z = t.constant(Tensor::new(vec![2, 5, 5], logits.clone()).unwrap());
            let s = t.softmax_masked(z, &mask).unwrap();
            let got = t.value(s).data();
            for (r, row) in logits.chunks(5).enumerate() {
                // oracle: no max subtraction, plain exp/normalize
                let e: Vec<f64> = (0..5).map(|j| if mask.get(r % 5, j) { row[j].exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                let sum: f64 = got[r * 5..r * 5 + 5].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                for j in 0..5 {
                    assert!((got[r * 5 + j] - e[j] / z).abs() < 1e-12);
                    if !mask.get(r % 5, j) {
                        assert_eq!(got[r * 5 + j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        for seed in 0..5 {
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.tanh(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.05, |t, x| t.relu(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.sigmoid(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.exp(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.05, |t, x| t.abs(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.square(x)) < 1e-7);
            assert!(check(&[3, 4], seed, 0.1, |t, x| {
                let a = t.abs(x);
                t.sqrt(a)
            }) < 1e-6);
            assert!(check(&[3, 4], seed, 0.1, |t, x| {
                let e = t.exp(x);
                t.div(x, e).unwrap()
            }) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.row_norms(x).unwrap()) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.sum_rows(x).unwrap()) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| {
                let m = t.mean(x);
                t.scale(m, 3.0)
            }) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| t.transpose(x).unwrap()) < 1e-7);
            assert!(check(&[3, 4], seed, 0.0, |t, x| {
                let s = t.slice_cols(x, 1, 2).unwrap();
                let r = t.reshape(x, &[4, 3]).unwrap();
                let rt = t.transpose(r).unwrap();
                let c = t.concat_cols(&[s, rt]).unwrap();
                t.square(c)
            }) < 1e-7);
            assert!(check(&[4], seed, 0.0, |t, x| {
                let r = t.repeat_rows(x, 3).unwrap();
                let z = t.constant(Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.1).collect()).unwrap());
                let a = t.add_row(z, x).unwrap();
                t.mul(r, a).unwrap()
            }) < 1e-7);
        }
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        for seed in 0..5 {
            let mask = BoolMatrix::from_fn(4, 4, |i, j| j <= i);
            assert!(check(&[2, 4, 4], seed, 0.0, |t, x| t.softmax_masked(x, &mask).unwrap()) < 1e-6);
            assert!(check(&[3, 5], seed, 0.0, |t, x| {
                let g = t.constant(Tensor::new(vec![5], vec![1.0, 0.5, -0.3, 2.0, 0.7]).unwrap());
                let b = t.constant(Tensor::new(vec![5], vec![0.1; 5]).unwrap());
                t.layer_norm(x, g, b, 1e-5).unwrap()
            }) < 1e-6);
        }
    }

    #[test]
    fn image_op_gradients() {
        let kernel = [0.25, 0.5, 0.25];
        for seed in 0..3 {
            assert!(check(&[2, 6, 7], seed, 0.0, |t, x| {
                let w = t.constant(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|v| ((v * 7 % 11) as f64 - 5.0) * 0.1).collect()).unwrap());
                t.conv2d(x, w, None, 1).unwrap()
            }) < 1e-7);
            assert!(check(&[2, 6, 8], seed, 0.0, |t, x| t.avg_pool2(x).unwrap()) < 1e-7);
            assert!(check(&[2, 6, 7], seed, 0.0, |t, x| t.blur(x, &kernel).unwrap()) < 1e-7);
            assert!(check(&[2, 6, 7], seed, 0.0, |t, x| t.resize(x, 4, 5).unwrap()) < 1e-7);
            assert!(check(&[2, 6, 7], seed, 0.0, |t, x| t.crop(x, 1, 2, 3, 4).unwrap()) < 1e-7);
        }
    }

    #[test]
    fn conv_weight_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_vec(&mut rng, 2 * 5 * 5);
        let w0 = rand_vec(&mut rng, 3 * 2 * 9);
        let b0 = rand_vec(&mut rng, 3);
        let f = |w: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(vec![2, 5, 5], x0.clone()).unwrap());
            let wv = t.param(Tensor::new(vec![3, 2, 3, 3], w.to_vec()).unwrap());
            let bv = t.param(Tensor::new(vec![3], b.to_vec()).unwrap());
            let y = t.conv2d(x, wv, Some(bv), 0).unwrap();
            let y = t.tanh(y);
            let l = t.sum(y);
            t.backward(l).unwrap();
            (t.value(l).item(), t.grad(wv).unwrap().to_vec(), t.grad(bv).unwrap().to_vec())
        };
        let (_, gw, gb) = f(&w0, &b0);
        assert!(rel_err(&gw, &numeric_grad(|w| f(w, &b0).0, &w0, 1e-5)) < 1e-7);
        assert!(rel_err(&gb, &numeric_grad(|b| f(&w0, b).0, &b0, 1e-5)) < 1e-7);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || check(&[3, 4], 9, 0.0, |t, x| t.tanh(x));
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn backward_with_seed_injects_upstream() {
        let mut t = Tape::new();
        let x = t.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = t.scale(x, 3.0);
        t.backward_with(y, &[1.0, -1.0]).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0, -3.0]);
        assert!(t.backward_with(y, &[1.0]).is_err());
    }
}
