use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{build_masks, MaskPair};
use crate::error::{Error, Result};
use crate::tensor::{
    multihead_attention, sinusoidal_positions, Activation, AttentionLayer, Bound, Linear, Mlp, ParamId,
    ParamSet, Tape, Tensor, Var,
};

pub const EXPR_HIDDEN: usize = 128;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqConfig {
    pub feature_dim: usize,
    pub lip_dim: usize,
    pub wrinkle_dim: usize,
    pub expr_dim: usize,
    pub vertex_count: usize,
    pub encoder_width: usize,
    pub encoder_heads: usize,
    pub encoder_blocks: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_blocks: usize,
    pub decoder_ff: usize,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            lip_dim: 3,
            wrinkle_dim: 6,
            expr_dim: 6,
            vertex_count: 1,
            encoder_width: 64,
            encoder_heads: 4,
            encoder_blocks: 2,
            decoder_width: 128,
            decoder_heads: 4,
            decoder_blocks: 2,
            decoder_ff: 1024,
        }
    }
}

impl SeqConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.lip_dim,
            self.wrinkle_dim,
            self.expr_dim,
            self.vertex_count,
            self.encoder_width,
            self.encoder_blocks,
            self.decoder_blocks,
            self.decoder_ff,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("sequence dimensions must be positive: {self:?}")));
        }
        if self.encoder_heads == 0 || !self.encoder_width.is_multiple_of(self.encoder_heads) {
            return Err(Error::Config("encoder width must be divisible by its head count".into()));
        }
        if self.decoder_heads == 0 || !self.decoder_width.is_multiple_of(self.decoder_heads) {
            return Err(Error::Config("decoder width must be divisible by its head count".into()));
        }
        if self.decoder_width <= self.encoder_width {
            return Err(Error::Config("decoder width must exceed the lip feature width".into()));
        }
        Ok(())
    }

    /// Width of the projected expression half of the decoder memory.
    pub fn latent_width(&self) -> usize {
        self.decoder_width - self.encoder_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(params: &mut ParamSet, name: &str, d: usize) -> Self {
        let gamma = params.add(format!("{name}.gamma"), Tensor::new(vec![d], vec![1.0; d]).expect("sized"));
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), LN_EPS)
    }
}

fn positions(tape: &mut Tape, t: usize, d: usize) -> Var {
    tape.constant(sinusoidal_positions(t, d))
}

fn rows_of(tape: &Tape, x: Var, want_cols: usize, op: &'static str) -> Result<usize> {
    let (t, c) = tape.value(x).dims2()?;
    if c != want_cols || t == 0 {
        return Err(Error::shape(op, format!("expected T×{want_cols}, got {t}×{c}")));
    }
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct EncoderBlock {
    ln1: LayerNorm,
    attn: AttentionLayer,
    ln2: LayerNorm,
    ff: Mlp,
}

/// Causal pre-norm transformer encoder with a linear output head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub params: ParamSet,
    input: Linear,
    blocks: Vec<EncoderBlock>,
    ln_f: LayerNorm,
    pub head: Linear,
    pub width: usize,
    heads: usize,
}

impl Encoder {
    pub fn new<R: Rng>(name: &str, input: usize, width: usize, heads: usize, blocks: usize, head_out: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let inp = Linear::new(&mut params, &format!("{name}.in"), input, width, rng);
        let blocks = (0..blocks)
            .map(|b| {
                let p = format!("{name}.block{b}");
                EncoderBlock {
                    ln1: LayerNorm::new(&mut params, &format!("{p}.ln1"), width),
                    attn: AttentionLayer::new(&mut params, &format!("{p}.attn"), width, rng),
                    ln2: LayerNorm::new(&mut params, &format!("{p}.ln2"), width),
                    ff: Mlp::new(&mut params, &format!("{p}.ff"), &[width, 4 * width, width], Activation::Relu, Activation::Identity, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, &format!("{name}.ln_f"), width);
        let head = Linear::new(&mut params, &format!("{name}.head"), width, head_out, rng);
        Self { params, input: inp, blocks, ln_f, head, width, heads }
    }

    /// `(features T×width, head output)`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let t = rows_of(tape, x, self.input.fan_in, "encoder")?;
        let mask = build_masks(t).target;
        let h = self.input.forward(tape, bound, x)?;
        let pe = positions(tape, t, self.width);
        let mut h = tape.add(h, pe)?;
        for b in &self.blocks {
            let a = b.ln1.apply(tape, bound, h)?;
            let w = b.attn.bind(bound);
            let a = multihead_attention(tape, a, a, a, &w, self.heads, &mask)?;
            h = tape.add(h, a)?;
            let f = b.ln2.apply(tape, bound, h)?;
            let f = b.ff.forward(tape, bound, f)?;
            h = tape.add(h, f)?;
        }
        let feats = self.ln_f.apply(tape, bound, h)?;
        let out = self.head.forward(tape, bound, feats)?;
        Ok((feats, out))
    }
}

/// Per-frame MLP from `[c; w]` to expression codes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionEncoder {
    pub params: ParamSet,
    pub mlp: Mlp,
}

impl ExpressionEncoder {
    pub fn new<R: Rng>(input: usize, expr_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "expr",
            &[input, EXPR_HIDDEN, EXPR_HIDDEN, expr_dim],
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self { params, mlp }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, cw: Var) -> Result<Var> {
        self.mlp.forward(tape, bound, cw)
    }
}

/// Projects expression codes into the decoder's memory space.
#[derive(Clone, Debug, PartialEq)]
pub struct Expr2Latent {
    pub params: ParamSet,
    pub mlp: Mlp,
}

impl Expr2Latent {
    pub fn new<R: Rng>(expr_dim: usize, width: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "e2l", &[expr_dim, width, width], Activation::Relu, Activation::Identity, rng);
        Self { params, mlp }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, e: Var) -> Result<Var> {
        self.mlp.forward(tape, bound, e)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct DecoderBlock {
    ln_sa: LayerNorm,
    self_attn: AttentionLayer,
    ln_ca: LayerNorm,
    cross_attn: AttentionLayer,
    ln_ff: LayerNorm,
    ff: Mlp,
}

/// Masked transformer decoder from motion features to per-frame vertex offsets.
///
/// Self-attention runs over the embedded vertex history under the look-ahead
/// mask; cross-attention reads the motion memory under the alignment mask and
/// feeds a per-frame stream that self-attention never sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub params: ParamSet,
    history: Linear,
    blocks: Vec<DecoderBlock>,
    ln_f: LayerNorm,
    pub mapper: Mlp,
    width: usize,
    heads: usize,
    out: usize,
}

impl Decoder {
    pub fn new<R: Rng>(cfg: &SeqConfig, rng: &mut R) -> Self {
        let d = cfg.decoder_width;
        let v3 = 3 * cfg.vertex_count;
        let mut params = ParamSet::new();
        let history = Linear::new(&mut params, "dec.history", v3, d, rng);
        let blocks = (0..cfg.decoder_blocks)
            .map(|b| {
                let p = format!("dec.block{b}");
                DecoderBlock {
                    ln_sa: LayerNorm::new(&mut params, &format!("{p}.ln_sa"), d),
                    self_attn: AttentionLayer::new(&mut params, &format!("{p}.self"), d, rng),
                    ln_ca: LayerNorm::new(&mut params, &format!("{p}.ln_ca"), d),
                    cross_attn: AttentionLayer::new(&mut params, &format!("{p}.cross"), d, rng),
                    ln_ff: LayerNorm::new(&mut params, &format!("{p}.ln_ff"), d),
                    ff: Mlp::new(&mut params, &format!("{p}.ff"), &[d, cfg.decoder_ff, d], Activation::Relu, Activation::Identity, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut params, "dec.ln_f", d);
        let mapper = Mlp::new(&mut params, "dec.mapper", &[d, d, v3], Activation::Relu, Activation::Identity, rng);
        Self { params, history, blocks, ln_f, mapper, width: d, heads: cfg.decoder_heads, out: v3 }
    }

    /// Offsets `T×3V` from vertex history `T×3V` (row `t` holds frame `t−1`) and memory `T×width`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, history: Var, memory: Var, masks: &MaskPair) -> Result<Var> {
        let t = rows_of(tape, history, self.out, "decoder history")?;
        if rows_of(tape, memory, self.width, "decoder memory")? != t || masks.target.rows() != t {
            return Err(Error::shape("decoder", "history, memory and masks disagree on length"));
        }
        let pe = positions(tape, t, self.width);
        let h = self.history.forward(tape, bound, history)?;
        let mut h = tape.add(h, pe)?;
        let mem = tape.add(memory, pe)?;
        let mut y = tape.constant(Tensor::zeros(&[t, self.width]));
        for b in &self.blocks {
            let a = b.ln_sa.apply(tape, bound, h)?;
            let w = b.self_attn.bind(bound);
            let a = multihead_attention(tape, a, a, a, &w, self.heads, &masks.target)?;
            h = tape.add(h, a)?;
            let hy = tape.add(h, y)?;
            let q = b.ln_ca.apply(tape, bound, hy)?;
            let w = b.cross_attn.bind(bound);
            let c = multihead_attention(tape, q, mem, mem, &w, self.heads, &masks.alignment)?;
            y = tape.add(y, c)?;
            let hy = tape.add(h, y)?;
            let f = b.ln_ff.apply(tape, bound, hy)?;
            let f = b.ff.forward(tape, bound, f)?;
            y = tape.add(y, f)?;
        }
        let hy = tape.add(h, y)?;
        let z = self.ln_f.apply(tape, bound, hy)?;
        self.mapper.forward(tape, bound, z)
    }

    /// Plain forward on value arrays.
    pub fn run(&self, history: &[f64], memory: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::new(vec![t, self.out], history.to_vec())?);
        let m = tape.constant(Tensor::new(vec![t, self.width], memory.to_vec())?);
        let o = self.forward(&mut tape, &bound, h, m, &build_masks(t))?;
        Ok(tape.value(o).data().to_vec())
    }

    /// Feeds each prediction back as the next frame's history, one frame at a time.
    pub fn decode_stepwise(&self, memory: &[f64], t: usize) -> Result<Vec<f64>> {
        let (w, v3) = (self.width, self.out);
        let mut history = vec![0.0; v3];
        let mut out = Vec::with_capacity(t * v3);
        for step in 0..t {
            let o = self.run(&history, &memory[..(step + 1) * w], step + 1)?;
            let last = &o[step * v3..];
            out.extend_from_slice(last);
            history.extend_from_slice(last);
        }
        Ok(out)
    }

    pub fn output_width(&self) -> usize {
        self.out
    }
}

/// History rows for teacher forcing: zeros, then frames `0..T−1`.
pub fn shift_history(offsets: &[f64], v3: usize) -> Vec<f64> {
    let mut h = vec![0.0; v3];
    h.extend_from_slice(&offsets[..offsets.len() - v3]);
    h
}

/// Outputs of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub frames: usize,
    pub lip: Vec<f64>,
    pub wrinkle: Vec<f64>,
    pub expr: Vec<f64>,
    pub memory: Vec<f64>,
    pub offsets: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceModel {
    pub config: SeqConfig,
    pub lip: Encoder,
    pub wrinkle: Encoder,
    pub expr: ExpressionEncoder,
    pub e2l: Expr2Latent,
    pub decoder: Decoder,
}

impl SequenceModel {
    pub fn new<R: Rng>(config: SeqConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let lip = Encoder::new("lip", c.feature_dim, c.encoder_width, c.encoder_heads, c.encoder_blocks, c.lip_dim, rng);
        let wrinkle = Encoder::new(
            "wrinkle",
            c.feature_dim + c.encoder_width,
            c.encoder_width,
            c.encoder_heads,
            c.encoder_blocks,
            c.wrinkle_dim,
            rng,
        );
        let expr = ExpressionEncoder::new(2 * c.encoder_width, c.expr_dim, rng);
        let e2l = Expr2Latent::new(c.expr_dim, c.latent_width(), rng);
        let decoder = Decoder::new(c, rng);
        Ok(Self { config, lip, wrinkle, expr, e2l, decoder })
    }

    /// Frozen encoders: `(c, w, e)` as value arrays for features `T×D`.
    pub fn encode(&self, features: &[f64], t: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![t, self.config.feature_dim], features.to_vec())?);
        let lb = self.lip.params.bind_frozen(&mut tape);
        let (c, _) = self.lip.forward(&mut tape, &lb, x)?;
        let wb = self.wrinkle.params.bind_frozen(&mut tape);
        let xc = tape.concat_cols(&[x, c])?;
        let (w, _) = self.wrinkle.forward(&mut tape, &wb, xc)?;
        let eb = self.expr.params.bind_frozen(&mut tape);
        let cw = tape.concat_cols(&[c, w])?;
        let e = self.expr.forward(&mut tape, &eb, cw)?;
        Ok((tape.value(c).data().to_vec(), tape.value(w).data().to_vec(), tape.value(e).data().to_vec()))
    }

    /// Memory rows `[c; E2L(e)]`.
    pub fn memory(&self, c: &[f64], e: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.e2l.params.bind_frozen(&mut tape);
        let cv = tape.constant(Tensor::new(vec![t, self.config.encoder_width], c.to_vec())?);
        let ev = tape.constant(Tensor::new(vec![t, self.config.expr_dim], e.to_vec())?);
        let l = self.e2l.forward(&mut tape, &b, ev)?;
        let m = tape.concat_cols(&[cv, l])?;
        Ok(tape.value(m).data().to_vec())
    }

    /// Full inference with step-by-step decoding.
    pub fn predict(&self, features: &[f64], t: usize) -> Result<Prediction> {
        let (lip, wrinkle, expr) = self.encode(features, t)?;
        let memory = self.memory(&lip, &expr, t)?;
        let offsets = self.decoder.decode_stepwise(&memory, t)?;
        Ok(Prediction { frames: t, lip, wrinkle, expr, memory, offsets })
    }

    pub fn param_sets(&self) -> [(&'static str, &ParamSet); 5] {
        [
            ("lip", &self.lip.params),
            ("wrinkle", &self.wrinkle.params),
            ("expr", &self.expr.params),
            ("e2l", &self.e2l.params),
            ("decoder", &self.decoder.params),
        ]
    }

    pub fn param_sets_mut(&mut self) -> [(&'static str, &mut ParamSet); 5] {
        [
            ("lip", &mut self.lip.params),
            ("wrinkle", &mut self.wrinkle.params),
            ("expr", &mut self.expr.params),
            ("e2l", &mut self.e2l.params),
            ("decoder", &mut self.decoder.params),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> SeqConfig {
        SeqConfig {
            feature_dim: 5,
            lip_dim: 6,
            wrinkle_dim: 4,
            expr_dim: 3,
            vertex_count: 4,
            encoder_width: 8,
            encoder_heads: 2,
            encoder_blocks: 2,
            decoder_width: 16,
            decoder_heads: 4,
            decoder_blocks: 2,
            decoder_ff: 32,
        }
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_mapper_gives_template() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut m = SequenceModel::new(small(), &mut r).unwrap();
        let last = *m.decoder.mapper.last();
        last.zero(&mut m.decoder.params);
        let feats = rand_vec(&mut r, 7 * 5);
        let p = m.predict(&feats, 7).unwrap();
        assert!(p.offsets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stepwise_matches_parallel_on_same_history() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let m = SequenceModel::new(small(), &mut r).unwrap();
        let t = 6;
        let mem = rand_vec(&mut r, t * 16);
        let step = m.decoder.decode_stepwise(&mem, t).unwrap();
        let par = m.decoder.run(&shift_history(&step, 12), &mem, t).unwrap();
        assert_eq!(step, par);
    }

    #[test]
    fn encoder_is_causal() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let m = SequenceModel::new(small(), &mut r).unwrap();
        let t = 5;
        let f = rand_vec(&mut r, t * 5);
        let (c, w, e) = m.encode(&f, t).unwrap();
        let mut g = f.clone();
        g[4 * 5 + 1] += 0.7;
        let (c2, w2, e2) = m.encode(&g, t).unwrap();
        assert_eq!(c[..4 * 8], c2[..4 * 8]);
        assert_eq!(w[..4 * 8], w2[..4 * 8]);
        assert_eq!(e[..4 * 3], e2[..4 * 3]);
        assert_ne!(c[4 * 8..], c2[4 * 8..]);
    }

    #[test]
    fn expression_encoder_is_per_frame() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let m = SequenceModel::new(small(), &mut r).unwrap();
        let cw = rand_vec(&mut r, 4 * 16);
        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let b = m.expr.params.bind_frozen(&mut tape);
            let v = tape.constant(Tensor::new(vec![4, 16], x.to_vec()).unwrap());
            let o = m.expr.forward(&mut tape, &b, v).unwrap();
            tape.value(o).data().to_vec()
        };
        let a = run(&cw);
        let mut p = cw.clone();
        p[..16].copy_from_slice(&cw[48..]);
        p[48..].copy_from_slice(&cw[..16]);
        let b = run(&p);
        assert_eq!(a[..3], b[9..]);
        assert_eq!(a[9..], b[..3]);
        assert_eq!(a[3..9], b[3..9]);
    }

    #[test]
    fn bad_config_rejected() {
        let mut c = small();
        c.decoder_heads = 3;
        assert!(SequenceModel::new(c, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
