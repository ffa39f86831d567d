use rand::Rng;

use super::{BoolMatrix, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform init in ±sqrt(1/fan_in).
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches data"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Registers every tensor as a constant (no gradient flows into this set).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }

    /// Overwrites values from another set with identical layout.
    pub fn copy_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names
            || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Invalid("parameter layouts differ".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// A [`ParamSet`] registered on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Splits into the first `at` parameters and the rest, for sets concatenated from two modules.
    pub fn split(&self, at: usize) -> (Bound, Bound) {
        (Bound { vars: self.vars[..at].to_vec() }, Bound { vars: self.vars[at..].to_vec() })
    }

    /// Gradients in parameter order; `None` for tensors the loss never reached.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Vec<f64>>> {
        self.vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// `y = x·W + b`, with `W` stored as `[in × out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = params.uniform(format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
        let b = params.uniform(format!("{name}.b"), &[fan_out], fan_in, rng);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.w))?;
        tape.add_row(y, bound.var(self.b))
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.w).data_mut().fill(0.0);
        params.get_mut(self.b).data_mut().fill(0.0);
    }
}

/// Affine–activation chain; the final layer uses `output` instead of `hidden`.
pub fn mlp_forward(
    tape: &mut Tape,
    x: Var,
    layers: &[(Var, Var)],
    hidden: Activation,
    output: Activation,
) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = tape.matmul(h, w)?;
        h = tape.add_row(h, b)?;
        let act = if i + 1 == layers.len() { output } else { hidden };
        h = act.apply(tape, h);
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `widths = [in, h1, .., out]`.
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let vars: Vec<_> = self.layers.iter().map(|l| (bound.var(l.w), bound.var(l.b))).collect();
        mlp_forward(tape, x, &vars, self.hidden, self.output)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// Bound projection weights of one multi-head attention layer (`W` as `[d × d]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Query/key/value/output projections of an attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionLayer {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(params, &format!("{name}.q"), d, d, rng),
            k: Linear::new(params, &format!("{name}.k"), d, d, rng),
            v: Linear::new(params, &format!("{name}.v"), d, d, rng),
            o: Linear::new(params, &format!("{name}.o"), d, d, rng),
        }
    }

    pub fn bind(&self, bound: &Bound) -> AttentionWeights {
        AttentionWeights {
            wq: bound.var(self.q.w),
            bq: bound.var(self.q.b),
            wk: bound.var(self.k.w),
            bk: bound.var(self.k.b),
            wv: bound.var(self.v.w),
            bv: bound.var(self.v.b),
            wo: bound.var(self.o.w),
            bo: bound.var(self.o.b),
        }
    }
}

/// Scaled dot-product attention split over `heads`, concatenated and output-projected.
///
/// `q` is `T×d`, `k`/`v` are `S×d`; the mask is `T×S` with `true` = attend.
pub fn multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w: &AttentionWeights,
    heads: usize,
    mask: &BoolMatrix,
) -> Result<Var> {
    let (_, d) = tape.value(q).dims2()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(
            "multihead_attention",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let qp = tape.matmul(q, w.wq)?;
    let qp = tape.add_row(qp, w.bq)?;
    let kp = tape.matmul(k, w.wk)?;
    let kp = tape.add_row(kp, w.bk)?;
    let vp = tape.matmul(v, w.wv)?;
    let vp = tape.add_row(vp, w.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(qp, h * dh, dh)?;
        let kh = tape.slice_cols(kp, h * dh, dh)?;
        let vh = tape.slice_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_masked(scores, mask)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let o = tape.matmul(cat, w.wo)?;
    tape.add_row(o, w.bo)
}

/// Standard sinusoidal position table, `T×d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![t, d], data).expect("sized")
}
