//! Central finite-difference checking shared by unit tests, the acceptance
//! suite and the `check-grad` command.
//!
//! Every differentiable operation is covered by a registered [`Suite`]. A suite
//! draws a random instance from its seed, computes analytic gradients for each
//! parameter group and compares them against central differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Bound, ParamSet, Tape, Tensor, Var};

/// Central differences of `f` at `x` with step `h`.
pub fn numeric_grad(f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    numeric_grad_at(f, x, h, &all)
}

/// Central differences restricted to the coordinates `idx`.
pub fn numeric_grad_at(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64, idx: &[usize]) -> Vec<f64> {
    let mut p = x.to_vec();
    idx.iter()
        .map(|&i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let dn = f(&p);
            p[i] = x0;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Central differences together with the largest disagreement between the
/// forward and backward one-sided slopes, which exposes kinks within `±h`.
pub fn numeric_probe(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64, idx: &[usize]) -> (Vec<f64>, f64) {
    let f0 = f(x);
    let mut p = x.to_vec();
    let mut kink = 0.0_f64;
    let grad = idx
        .iter()
        .map(|&i| {
            let x0 = p[i];
            p[i] = x0 + h;
            let up = f(&p);
            p[i] = x0 - h;
            let dn = f(&p);
            p[i] = x0;
            kink = kink.max((((up - f0) - (f0 - dn)) / h).abs());
            (up - dn) / (2.0 * h)
        })
        .collect();
    (grad, kink)
}

/// Magnitude below which gradients are compared on an absolute scale; identically
/// zero gradients (e.g. attention key biases) leave only rounding noise.
pub const SCALE_FLOOR: f64 = 1e-5;

/// `max_i |a_i − n_i| / max(max|n|, max|a|, SCALE_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    if analytic.iter().chain(numeric).any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

/// Analytic and numeric gradients of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Largest one-sided slope disagreement seen by the numeric side.
    pub kink: f64,
}

impl GroupCheck {
    pub fn new(name: impl Into<String>, analytic: Vec<f64>, numeric: Vec<f64>) -> Self {
        Self { name: name.into(), analytic, numeric, kink: 0.0 }
    }

    pub fn with_kink(mut self, kink: f64) -> Self {
        self.kink = kink;
        self
    }

    /// Whether the function is smooth enough at this point for central
    /// differences to resolve `tolerance`. Looks at the numeric side only.
    pub fn resolvable(&self, tolerance: f64) -> bool {
        let scale = self.numeric.iter().fold(SCALE_FLOOR, |m, v| m.max(v.abs()));
        self.kink <= tolerance * scale
    }

    pub fn err(&self) -> f64 {
        rel_err(&self.analytic, &self.numeric)
    }
}

/// Deliberate corruption of the analytic side, used to prove the checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// Negates the analytic gradient of the group with the largest magnitude.
    FlipSign,
}

fn inject(groups: &mut [GroupCheck], fault: Fault) {
    match fault {
        Fault::FlipSign => {
            let mag = |g: &GroupCheck| g.analytic.iter().map(|v| v.abs()).sum::<f64>();
            if let Some(g) = groups.iter_mut().max_by(|a, b| mag(a).total_cmp(&mag(b))) {
                g.analytic.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
}

type SuiteFn = fn(u64, f64) -> Result<Vec<GroupCheck>>;

/// One registered finite-difference suite.
#[derive(Clone, Copy)]
pub struct Suite {
    pub component: &'static str,
    pub name: &'static str,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    run: SuiteFn,
}

impl std::fmt::Debug for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.component, self.name)
    }
}

/// Outcome of one suite on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRun {
    pub component: String,
    pub suite: String,
    pub seed: u64,
    pub worst_group: String,
    pub err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Instances discarded because a kink sat inside the difference stencil.
    pub redraws: u32,
}

/// Instances tried per seed before the last one is checked regardless.
pub const MAX_DRAWS: u32 = 8;

impl Suite {
    /// Groups of the first instance drawn from `seed` that central differences
    /// can resolve, and the number of instances discarded before it.
    pub fn groups(&self, seed: u64) -> Result<(Vec<GroupCheck>, u32)> {
        let mut draw = 0;
        loop {
            let s = if draw == 0 { seed } else { derive_seed(seed, &[0x6b1e, u64::from(draw)]) };
            let groups = (self.run)(s, self.step)?;
            if draw + 1 == MAX_DRAWS || groups.iter().all(|g| g.resolvable(self.tolerance)) {
                return Ok((groups, draw));
            }
            draw += 1;
        }
    }

    pub fn run(&self, seed: u64, fault: Option<Fault>) -> Result<SuiteRun> {
        let (mut groups, redraws) = self.groups(seed)?;
        if let Some(f) = fault {
            inject(&mut groups, f);
        }
        let (worst_group, err) = groups
            .iter()
            .map(|g| (g.name.clone(), g.err()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or_default();
        Ok(SuiteRun {
            component: self.component.into(),
            suite: self.name.into(),
            seed,
            worst_group,
            err,
            tolerance: self.tolerance,
            passed: err < self.tolerance,
            redraws,
        })
    }
}

/// Worst case of one suite over a seed range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub component: String,
    pub suite: String,
    pub step: f64,
    pub tolerance: f64,
    pub seeds: u64,
    pub worst_err: f64,
    pub worst_seed: u64,
    pub worst_group: String,
    pub failures: u64,
    pub redraws: u64,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `suite` on seeds `first..first + count`.
pub fn summarize(suite: &Suite, first: u64, count: u64, fault: Option<Fault>) -> Result<SuiteSummary> {
    let mut s = SuiteSummary {
        component: suite.component.into(),
        suite: suite.name.into(),
        step: suite.step,
        tolerance: suite.tolerance,
        seeds: count,
        worst_err: 0.0,
        worst_seed: first,
        worst_group: String::new(),
        failures: 0,
        redraws: 0,
    };
    for seed in first..first + count {
        let r = suite.run(seed, fault)?;
        if !r.passed {
            s.failures += 1;
        }
        s.redraws += u64::from(r.redraws);
        if r.err >= s.worst_err {
            s.worst_err = r.err;
            s.worst_seed = seed;
            s.worst_group = r.worst_group;
        }
    }
    Ok(s)
}

pub const COMPONENTS: [&str; 6] = ["tensor", "splats", "raster", "losses", "color", "sequence"];

/// Default tolerance of the autodiff, loss, color and sequence suites.
pub const TOL: f64 = 1e-4;
/// Tolerance of suites that differentiate through the rasterizer.
pub const TOL_RASTER: f64 = 1e-3;

const H: f64 = 1e-5;
const H_RASTER: f64 = 1e-4;

/// The full registry, in component order.
pub fn suites() -> Vec<Suite> {
    let s = |component, name, step, tolerance, run| Suite { component, name, step, tolerance, run };
    vec![
        s("tensor", "matmul", H, TOL, ops::matmul as SuiteFn),
        s("tensor", "pointwise", H, TOL, ops::pointwise),
        s("tensor", "structural", H, TOL, ops::structural),
        s("tensor", "reductions", H, TOL, ops::reductions),
        s("tensor", "softmax_masked", H, TOL, ops::softmax),
        s("tensor", "layer_norm", H, TOL, ops::layer_norm),
        s("tensor", "conv2d", H, TOL, ops::conv2d),
        s("tensor", "image_ops", H, TOL, ops::image_ops),
        s("tensor", "attention", H, TOL, ops::attention),
        s("tensor", "mlp", H, TOL, ops::mlp),
        s("tensor", "mlp_softmax", H, TOL, ops::mlp_softmax),
        s("splats", "to_global_chain", H, TOL, rig::to_global_chain),
        s("raster", "end_to_end", H_RASTER, TOL_RASTER, rig::raster),
        s("raster", "view_dirs", H, TOL, rig::view_directions),
        s("losses", "l_rgb", H, TOL, loss::rgb),
        s("losses", "ssim", H, TOL, loss::ssim),
        s("losses", "hinges", H, TOL, loss::hinges),
        s("losses", "gram", H, TOL, loss::gram),
        s("losses", "l_global", H, TOL, loss::global),
        s("losses", "l_patch", H, TOL, loss::patch),
        s("losses", "l_wrinkle", H, TOL, loss::wrinkle),
        s("losses", "objective", H, TOL, loss::objective),
        s("color", "forward", H, TOL, rig::color_forward),
        s("color", "through_render", H_RASTER, TOL_RASTER, rig::color_through_render),
        s("sequence", "encoder", H, TOL, seq::encoder),
        s("sequence", "expression_encoder", H, TOL, seq::expression),
        s("sequence", "expr2latent", H, TOL, seq::e2l),
        s("sequence", "decoder", H, TOL, seq::decoder),
        s("sequence", "vertex_loss", H, TOL, seq::vertex_loss),
    ]
}

/// Suites matching `selector`: `all`, a component name, or `component/suite`.
pub fn select(selector: &str) -> Result<Vec<Suite>> {
    let all = suites();
    let picked: Vec<Suite> = match selector {
        "all" => all,
        sel => match sel.split_once('/') {
            Some((c, n)) => all.into_iter().filter(|s| s.component == c && s.name == n).collect(),
            None => all.into_iter().filter(|s| s.component == sel).collect(),
        },
    };
    if picked.is_empty() {
        return Err(Error::Invalid(format!("no gradient suite matches `{selector}` (components: all, {})", COMPONENTS.join(", "))));
    }
    Ok(picked)
}

// ---- harness ---------------------------------------------------------------

/// Coordinates compared per group; larger groups are sampled.
const MAX_COORDS: usize = 24;

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Uniform values with magnitude at least `lo`, random sign.
fn away_from_zero(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = r.random_range(lo..hi);
            if r.random_bool(0.5) { v } else { -v }
        })
        .collect()
}

fn coords(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    if n <= MAX_COORDS {
        (0..n).collect()
    } else {
        let mut v = sample(r, n, MAX_COORDS).into_vec();
        v.sort_unstable();
        v
    }
}

struct Leaf {
    name: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn leaf(name: &'static str, shape: &[usize], data: Vec<f64>) -> Leaf {
    Leaf { name, shape: shape.to_vec(), data }
}

type Build<'a> = &'a dyn Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>;

/// Evaluates `Σ w ⊙ build(...)` with fixed random weights `w`; `grads` adds
/// the gradients of every parameter tensor followed by every leaf.
fn graph_loss(seed: u64, params: &ParamSet, leaves: &[Leaf], values: &[Vec<f64>], build: Build, grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let mut ps = params.clone();
    for (t, v) in ps.tensors_mut().iter_mut().zip(values) {
        *t = Tensor::new(t.shape().to_vec(), v.clone())?;
    }
    let bound = ps.bind(&mut tape);
    let mut vars = Vec::with_capacity(leaves.len());
    for (l, v) in leaves.iter().zip(&values[params.len()..]) {
        vars.push(tape.param(Tensor::new(l.shape.clone(), v.clone())?));
    }
    let y = build(&mut tape, &bound, &vars)?;
    let w = uniform(&mut rng(seed, 0x0b5e), tape.value(y).numel(), -1.0, 1.0);
    let wv = tape.constant(Tensor::new(tape.shape(y).to_vec(), w)?);
    let p = tape.mul(y, wv)?;
    let loss = tape.sum(p);
    let value = tape.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    let mut out: Vec<Vec<f64>> = bound
        .grads(&tape)
        .into_iter()
        .zip(params.tensors())
        .map(|(g, t)| g.unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    for (v, l) in vars.iter().zip(leaves) {
        out.push(tape.grad(*v).map_or_else(|| vec![0.0; l.data.len()], <[f64]>::to_vec));
    }
    Ok((value, out))
}

/// Checks every parameter tensor and leaf of a tape-built function.
fn check_graph(seed: u64, h: f64, params: &ParamSet, leaves: Vec<Leaf>, build: Build) -> Result<Vec<GroupCheck>> {
    let mut values: Vec<Vec<f64>> = params.tensors().iter().map(|t| t.data().to_vec()).collect();
    values.extend(leaves.iter().map(|l| l.data.clone()));
    let names: Vec<String> = params.names().iter().cloned().chain(leaves.iter().map(|l| l.name.to_string())).collect();
    let (_, analytic) = graph_loss(seed, params, &leaves, &values, build, true)?;
    let mut pick = rng(seed, 0xc0de);
    let mut out = Vec::with_capacity(values.len());
    for (i, name) in names.into_iter().enumerate() {
        let idx = coords(&mut pick, values[i].len());
        let mut vals = values.clone();
        let (numeric, kink) = numeric_probe(
            |x| {
                vals[i].copy_from_slice(x);
                graph_loss(seed, params, &leaves, &vals, build, false).map_or(f64::NAN, |r| r.0)
            },
            &values[i],
            h,
            &idx,
        );
        out.push(GroupCheck::new(name, idx.iter().map(|&k| analytic[i][k]).collect(), numeric).with_kink(kink));
    }
    Ok(out)
}

fn no_params() -> ParamSet {
    ParamSet::new()
}

/// `1×n` view for concatenating differently shaped outputs.
fn flat(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).numel();
    t.reshape(v, &[1, n])
}

fn cat_flat(t: &mut Tape, vs: &[Var]) -> Result<Var> {
    let f = vs.iter().map(|&v| flat(t, v)).collect::<Result<Vec<_>>>()?;
    t.concat_cols(&f)
}

// ---- autodiff kernels ------------------------------------------------------

mod ops {
    use super::*;
    use crate::losses::gaussian_kernel;
    use crate::tensor::{multihead_attention, Activation, AttentionLayer, BoolMatrix, Mlp};

    pub fn matmul(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 1);
        let leaves = vec![leaf("a", &[3, 4], uniform(&mut r, 12, -1.0, 1.0)), leaf("b", &[4, 2], uniform(&mut r, 8, -1.0, 1.0))];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| t.matmul(v[0], v[1]))
    }

    pub fn pointwise(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 2);
        let leaves = vec![leaf("x", &[2, 5], away_from_zero(&mut r, 10, 0.1, 1.5)), leaf("y", &[2, 5], uniform(&mut r, 10, -1.0, 1.0))];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| {
            let (x, y) = (v[0], v[1]);
            let a = t.tanh(x);
            let b = t.sigmoid(x);
            let c = t.exp(x);
            let d = t.square(x);
            let e = t.abs(x);
            let f = t.relu(x);
            let g = t.sqrt(c);
            let s = t.scale(x, -0.7);
            let k = t.add_const(s, 0.3);
            let den = t.add_const(c, 0.5);
            let q = t.div(y, den)?;
            let m = t.mul(x, y)?;
            cat_flat(t, &[a, b, c, d, e, f, g, k, q, m])
        })
    }

    pub fn structural(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 3);
        let leaves = vec![
            leaf("a", &[3, 4], uniform(&mut r, 12, -1.0, 1.0)),
            leaf("b", &[3, 4], uniform(&mut r, 12, -1.0, 1.0)),
            leaf("bias", &[4], uniform(&mut r, 4, -1.0, 1.0)),
            leaf("row", &[1, 4], uniform(&mut r, 4, -1.0, 1.0)),
        ];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| {
            let (a, b, bias, row) = (v[0], v[1], v[2], v[3]);
            let s = t.add(a, b)?;
            let d = t.sub(a, b)?;
            let ar = t.add_row(a, bias)?;
            let tr = t.transpose(b)?;
            let rs = t.reshape(a, &[4, 3])?;
            let cc = t.concat_cols(&[a, b])?;
            let sl = t.slice_cols(cc, 2, 4)?;
            let rp = t.repeat_rows(row, 3)?;
            let pr = t.mul(rp, sl)?;
            cat_flat(t, &[s, d, ar, tr, rs, pr])
        })
    }

    pub fn reductions(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 4);
        let leaves = vec![leaf("x", &[3, 4], away_from_zero(&mut r, 12, 0.1, 1.0))];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| {
            let s = t.sum(v[0]);
            let m = t.mean(v[0]);
            let sr = t.sum_rows(v[0])?;
            let n = t.row_norms(v[0])?;
            cat_flat(t, &[s, m, sr, n])
        })
    }

    pub fn softmax(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 5);
        let leaves = vec![leaf("logits", &[2, 4, 4], uniform(&mut r, 32, -2.0, 2.0))];
        let mask = BoolMatrix::from_fn(4, 4, |i, j| j <= i);
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| t.softmax_masked(v[0], &mask))
    }

    pub fn layer_norm(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 6);
        let leaves = vec![
            leaf("x", &[3, 5], uniform(&mut r, 15, -1.0, 1.0)),
            leaf("gamma", &[5], uniform(&mut r, 5, 0.5, 1.5)),
            leaf("beta", &[5], uniform(&mut r, 5, -0.5, 0.5)),
        ];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| t.layer_norm(v[0], v[1], v[2], 1e-5))
    }

    pub fn conv2d(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 7);
        let leaves = vec![
            leaf("x", &[2, 6, 6], uniform(&mut r, 72, -1.0, 1.0)),
            leaf("w", &[3, 2, 3, 3], uniform(&mut r, 54, -0.5, 0.5)),
            leaf("b", &[3], uniform(&mut r, 3, -0.5, 0.5)),
        ];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| t.conv2d(v[0], v[1], Some(v[2]), 1))
    }

    pub fn image_ops(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 8);
        let leaves = vec![leaf("x", &[2, 6, 7], uniform(&mut r, 84, -1.0, 1.0))];
        let k = gaussian_kernel(5, 1.0);
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| {
            let p = t.avg_pool2(v[0])?;
            let b = t.blur(v[0], &k)?;
            let down = t.resize(v[0], 4, 5)?;
            let up = t.resize(v[0], 9, 8)?;
            let c = t.crop(v[0], 1, 2, 4, 3)?;
            cat_flat(t, &[p, b, down, up, c])
        })
    }

    pub fn attention(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 9);
        let mut params = ParamSet::new();
        let layer = AttentionLayer::new(&mut params, "attn", 4, &mut r);
        let leaves = vec![
            leaf("q", &[3, 4], uniform(&mut r, 12, -1.0, 1.0)),
            leaf("kv", &[5, 4], uniform(&mut r, 20, -1.0, 1.0)),
        ];
        let causal = BoolMatrix::from_fn(3, 3, |i, j| j <= i);
        let cross = BoolMatrix::from_fn(3, 5, |i, j| (i + j) % 2 == 0 || j == 0);
        check_graph(seed, h, &params, leaves, &|t, b, v| {
            let w = layer.bind(b);
            let s = multihead_attention(t, v[0], v[0], v[0], &w, 2, &causal)?;
            let c = multihead_attention(t, v[0], v[1], v[1], &w, 2, &cross)?;
            cat_flat(t, &[s, c])
        })
    }

    pub fn mlp(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 10);
        let mut params = ParamSet::new();
        let m = Mlp::new(&mut params, "mlp", &[4, 6, 3], Activation::Tanh, Activation::Identity, &mut r);
        let leaves = vec![leaf("x", &[3, 4], uniform(&mut r, 12, -1.0, 1.0))];
        check_graph(seed, h, &params, leaves, &|t, b, v| m.forward(t, b, v[0]))
    }

    pub fn mlp_softmax(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 11);
        let mut params = ParamSet::new();
        let m = Mlp::new(&mut params, "mlp", &[3, 5, 4], Activation::Tanh, Activation::Identity, &mut r);
        let leaves = vec![leaf("x", &[4, 3], uniform(&mut r, 12, -1.0, 1.0))];
        let mask = BoolMatrix::full(4, 4);
        check_graph(seed, h, &params, leaves, &|t, b, v| {
            let y = m.forward(t, b, v[0])?;
            let p = t.softmax_masked(y, &mask)?;
            let l = t.exp(p);
            Ok(t.mean(l))
        })
    }
}

// ---- rig, rasterizer and color ---------------------------------------------

mod rig {
    use super::*;
    use crate::color::ColorModel;
    use crate::losses::{FeatureBackend, ImageObjective, LossWeights, ToyConvBackend};
    use crate::math::{self, Vec3};
    use crate::mesh::{triangle_frames, triangle_frames_backward};
    use crate::raster::render::{splat_alpha, CUTOFF_SQ, MIN_TRANSMITTANCE};
    use crate::raster::{render, render_backward, view_dir_backward, view_dirs, Camera, RenderSettings};
    use crate::splats::{flat3, flat4, to_global, to_global_backward, unflat3, unflat4, GlobalGrad, RiggedGaussianSet};

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn quad() -> (Vec<Vec3>, Vec<[usize; 3]>) {
        (vec![[-0.6, -0.5, 0.0], [0.6, -0.5, 0.1], [0.0, 0.6, -0.1], [0.7, 0.6, 0.2]], vec![[0, 1, 2], [1, 3, 2]])
    }

    fn random_set(r: &mut ChaCha8Rng, n: usize, faces: usize, latent_dim: usize) -> RiggedGaussianSet {
        let mut set = RiggedGaussianSet::empty(latent_dim);
        for _ in 0..n {
            let f = r.random_range(0..faces);
            set.push_fresh(f, r);
            let i = set.len() - 1;
            set.mu_local[i] = [r.random_range(-0.4..0.4), r.random_range(-0.4..0.4), r.random_range(-0.3..0.3)];
            set.q_local[i] = [r.random_range(0.5..1.5), r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.6..0.6)];
            set.log_s[i] = [r.random_range(-1.2..-0.5), r.random_range(-1.2..-0.5), r.random_range(-1.2..-0.5)];
            set.opacity_logit[i] = r.random_range(-1.0..1.0);
        }
        set
    }

    /// Frames, local-to-global transform and a fixed linear readout of every global attribute.
    pub fn to_global_chain(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 20);
        let (mut pos, faces) = quad();
        for p in &mut pos {
            for c in p.iter_mut() {
                *c += r.random_range(-0.1..0.1);
            }
        }
        let set = random_set(&mut r, 6, faces.len(), 1);
        let g = set.len();
        let wm: Vec<Vec3> = (0..g).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let wr: Vec<math::Mat3> = (0..g).map(|_| std::array::from_fn(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))).collect();
        let ws: Vec<Vec3> = (0..g).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let wo = uniform(&mut r, g, -1.0, 1.0);
        let loss = |pos: &[Vec3], set: &RiggedGaussianSet| -> f64 {
            let Ok(frames) = triangle_frames(pos, &faces) else { return f64::NAN };
            let gl = to_global(set, &frames);
            let mut l = 0.0;
            for i in 0..g {
                l += math::dot(wm[i], gl.mean[i]) + math::dot(ws[i], gl.scale[i]) + wo[i] * gl.opacity[i];
                for a in 0..3 {
                    l += math::dot(wr[i][a], gl.rotation[i][a]);
                }
            }
            l
        };
        let frames = triangle_frames(&pos, &faces)?;
        let grad = GlobalGrad {
            mean: wm.clone(),
            rotation: wr.clone(),
            scale: ws.clone(),
            opacity_logit: (0..g).map(|i| {
                let s = sigmoid(set.opacity_logit[i]);
                wo[i] * s * (1.0 - s)
            }).collect(),
        };
        let (local, fg) = to_global_backward(&set, &frames, &grad);
        let gv = triangle_frames_backward(&pos, &faces, &fg);
        let with = |f: &dyn Fn(&mut RiggedGaussianSet, &[f64]), x: &[f64]| {
            let mut s = set.clone();
            f(&mut s, x);
            loss(&pos, &s)
        };
        Ok(vec![
            GroupCheck::new("mu_local", flat3(&local.mu_local), numeric_grad(|x| with(&|s, x| unflat3(&mut s.mu_local, x), x), &flat3(&set.mu_local), h)),
            GroupCheck::new("q_local", flat4(&local.q_local), numeric_grad(|x| with(&|s, x| unflat4(&mut s.q_local, x), x), &flat4(&set.q_local), h)),
            GroupCheck::new("log_s", flat3(&local.log_s), numeric_grad(|x| with(&|s, x| unflat3(&mut s.log_s, x), x), &flat3(&set.log_s), h)),
            GroupCheck::new(
                "opacity_logit",
                local.opacity_logit.clone(),
                numeric_grad(|x| with(&|s, x| s.opacity_logit.copy_from_slice(x), x), &set.opacity_logit, h),
            ),
            GroupCheck::new(
                "vertices",
                flat3(&gv),
                numeric_grad(|x| { let mut p = pos.clone(); unflat3(&mut p, x); loss(&p, &set) }, &flat3(&pos), h),
            ),
        ])
    }

    struct RasterScene {
        positions: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        set: RiggedGaussianSet,
        colors: Vec<Vec3>,
        cam: Camera,
        w_rgb: Vec<f64>,
        w_alpha: Vec<f64>,
    }

    impl RasterScene {
        fn loss(&self, positions: &[Vec3], set: &RiggedGaussianSet, colors: &[Vec3]) -> f64 {
            let Ok(frames) = triangle_frames(positions, &self.faces) else { return f64::NAN };
            let Ok(out) = render(set, &frames, colors, &self.cam, &RenderSettings::default()) else { return f64::NAN };
            let a: f64 = out.rgb.iter().zip(&self.w_rgb).map(|(x, w)| x * w).sum();
            let b: f64 = out.alpha.iter().zip(&self.w_alpha).map(|(x, w)| x * w).sum();
            a + b
        }

        /// No pixel sits near the cutoff, the α clamp, the early-out, or a depth tie.
        fn well_conditioned(&self) -> Result<bool> {
            let frames = triangle_frames(&self.positions, &self.faces)?;
            let out = render(&self.set, &frames, &self.colors, &self.cam, &RenderSettings::default())?;
            let st = out.state.as_ref().ok_or(Error::MissingRenderState)?;
            let vis: Vec<_> = st.prepared.iter().flatten().collect();
            if vis.len() != self.set.len() {
                return Ok(false);
            }
            for (i, a) in vis.iter().enumerate() {
                for b in &vis[i + 1..] {
                    if (a.depth - b.depth).abs() < 1e-3 {
                        return Ok(false);
                    }
                }
            }
            let (w, h) = (self.cam.width, self.cam.height);
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    for s in &vis {
                        let dx = px - s.mean2d[0];
                        let dy = py - s.mean2d[1];
                        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if (q - CUTOFF_SQ).abs() < 0.05 {
                            return Ok(false);
                        }
                        if splat_alpha(s, px, py).is_some_and(|(a, _)| a > 0.95) {
                            return Ok(false);
                        }
                    }
                    if st.final_t[y * w + x] < 20.0 * MIN_TRANSMITTANCE {
                        return Ok(false);
                    }
                }
            }
            Ok(true)
        }
    }

    fn raster_scene(r: &mut ChaCha8Rng, latent_dim: usize) -> RasterScene {
        let (mut positions, faces) = quad();
        for p in &mut positions {
            for c in p.iter_mut() {
                *c += r.random_range(-0.1..0.1);
            }
        }
        let set = random_set(r, 5, faces.len(), latent_dim);
        let colors = (0..5).map(|_| [r.random_range(0.1..0.9), r.random_range(0.1..0.9), r.random_range(0.1..0.9)]).collect();
        let eye = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 4.0];
        let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], 0.5, 8, 8);
        RasterScene { positions, faces, set, colors, cam, w_rgb: uniform(r, 3 * 64, -1.0, 1.0), w_alpha: uniform(r, 64, -1.0, 1.0) }
    }

    fn conditioned_scene(seed: u64, salt: u64, latent_dim: usize) -> Result<RasterScene> {
        let mut r = rng(seed, salt);
        loop {
            let sc = raster_scene(&mut r, latent_dim);
            if sc.well_conditioned()? {
                return Ok(sc);
            }
        }
    }

    /// All-attribute raster gradient, including mesh vertices.
    pub fn raster(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let sc = conditioned_scene(seed, 0x7a57, 1)?;
        let frames = triangle_frames(&sc.positions, &sc.faces)?;
        let out = render(&sc.set, &frames, &sc.colors, &sc.cam, &RenderSettings::default())?;
        let rg = render_backward(&out, &sc.w_rgb, Some(&sc.w_alpha))?;
        let (local, fg) = to_global_backward(&sc.set, &frames, &rg.global);
        let gv = triangle_frames_backward(&sc.positions, &sc.faces, &fg);

        let with_set = |f: &dyn Fn(&mut RiggedGaussianSet, &[f64]), x: &[f64]| {
            let mut s = sc.set.clone();
            f(&mut s, x);
            sc.loss(&sc.positions, &s, &sc.colors)
        };
        Ok(vec![
            GroupCheck::new(
                "colors",
                flat3(&rg.colors),
                numeric_grad(|x| { let mut c = sc.colors.clone(); unflat3(&mut c, x); sc.loss(&sc.positions, &sc.set, &c) }, &flat3(&sc.colors), h),
            ),
            GroupCheck::new("mu_local", flat3(&local.mu_local), numeric_grad(|x| with_set(&|s, x| unflat3(&mut s.mu_local, x), x), &flat3(&sc.set.mu_local), h)),
            GroupCheck::new("q_local", flat4(&local.q_local), numeric_grad(|x| with_set(&|s, x| unflat4(&mut s.q_local, x), x), &flat4(&sc.set.q_local), h)),
            GroupCheck::new("log_s", flat3(&local.log_s), numeric_grad(|x| with_set(&|s, x| unflat3(&mut s.log_s, x), x), &flat3(&sc.set.log_s), h)),
            GroupCheck::new(
                "opacity_logit",
                local.opacity_logit.clone(),
                numeric_grad(|x| with_set(&|s, x| s.opacity_logit.copy_from_slice(x), x), &sc.set.opacity_logit, h),
            ),
            GroupCheck::new(
                "vertices",
                flat3(&gv),
                numeric_grad(|x| { let mut p = sc.positions.clone(); unflat3(&mut p, x); sc.loss(&p, &sc.set, &sc.colors) }, &flat3(&sc.positions), h),
            ),
        ])
    }

    /// Unit view directions from splat means.
    pub fn view_directions(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 21);
        let (pos, faces) = quad();
        let set = random_set(&mut r, 5, faces.len(), 1);
        let frames = triangle_frames(&pos, &faces)?;
        let gl = to_global(&set, &frames);
        let cam = Camera::look_at([r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), 3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.6, 8, 8);
        let w: Vec<Vec3> = (0..gl.len()).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect();
        let loss = |means: &[f64]| {
            let mut g2 = gl.clone();
            unflat3(&mut g2.mean, means);
            view_dirs(&g2, &cam).iter().zip(&w).map(|(d, w)| math::dot(*d, *w)).sum::<f64>()
        };
        let analytic = flat3(&view_dir_backward(&gl.mean, &cam, &w));
        Ok(vec![GroupCheck::new("means", analytic, numeric_grad(loss, &flat3(&gl.mean), h))])
    }

    pub fn color_forward(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 22);
        let model = ColorModel::new(3, 2, 8, &mut r);
        let mut dirs = uniform(&mut r, 12, -1.0, 1.0);
        for d in dirs.chunks_mut(3) {
            let n = math::norm([d[0], d[1], d[2]]);
            d.iter_mut().for_each(|v| *v /= n);
        }
        let leaves = vec![
            leaf("psi", &[1, 3], uniform(&mut r, 3, -1.0, 1.0)),
            leaf("latent", &[4, 2], uniform(&mut r, 8, -1.0, 1.0)),
            leaf("dirs", &[4, 3], dirs),
        ];
        check_graph(seed, h, &model.params, leaves, &|t, b, v| model.forward(t, b, v[0], v[1], v[2]))
    }

    /// Color-network weights through rendering and the photometric image loss.
    pub fn color_through_render(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let sc = conditioned_scene(seed, 0xc0107, 2)?;
        let mut r = rng(seed, 23);
        let model = ColorModel::new(2, 2, 6, &mut r);
        let psi = uniform(&mut r, 2, -1.0, 1.0);
        let gt = uniform(&mut r, 3 * 64, 0.0, 1.0);
        let mask = vec![1.0; 64];
        let weights = LossWeights { lambda_p: 1.0, ..LossWeights::default() };
        let backend = ToyConvBackend::new(seed);
        let obj = ImageObjective {
            weights: &weights,
            backend: &backend as &dyn FeatureBackend,
            global_size: None,
            global: true,
            patch: Some((4, 2, seed)),
            wrinkle: None,
        };
        let frames = triangle_frames(&sc.positions, &sc.faces)?;
        let gl = to_global(&sc.set, &frames);
        let dirs = view_dirs(&gl, &sc.cam);
        let eval = |m: &ColorModel| -> Result<f64> {
            let mut tape = Tape::new();
            let cv = m.record(&mut tape, &psi, &sc.set.latent, &dirs, crate::color::ColorTrain { weights: true, ..crate::color::ColorTrain::NONE })?;
            let colors: Vec<Vec3> = tape.value(cv.colors).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let out = render(&sc.set, &frames, &colors, &sc.cam, &RenderSettings::default())?;
            Ok(obj.evaluate(&out.rgb, &gt, &mask, 8, 8)?.0)
        };
        let mut tape = Tape::new();
        let cv = model.record(&mut tape, &psi, &sc.set.latent, &dirs, crate::color::ColorTrain { weights: true, ..crate::color::ColorTrain::NONE })?;
        let colors: Vec<Vec3> = tape.value(cv.colors).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let out = render(&sc.set, &frames, &colors, &sc.cam, &RenderSettings::default())?;
        let (_, grad, _) = obj.evaluate(&out.rgb, &gt, &mask, 8, 8)?;
        let rg = render_backward(&out, &grad, None)?;
        tape.backward_with(cv.colors, &flat3(&rg.colors))?;
        let grads = cv.bound.grads(&tape);
        let mut pick = rng(seed, 0xc0de);
        let mut out = Vec::new();
        for (i, (name, t)) in model.params.names().iter().zip(model.params.tensors()).enumerate() {
            let idx = coords(&mut pick, t.numel());
            let an = grads[i].clone().unwrap_or_else(|| vec![0.0; t.numel()]);
            let numeric = numeric_grad_at(
                |x| {
                    let mut m = model.clone();
                    m.params.tensors_mut()[i] = Tensor::new(t.shape().to_vec(), x.to_vec()).expect("same shape");
                    eval(&m).unwrap_or(f64::NAN)
                },
                t.data(),
                h,
                &idx,
            );
            out.push(GroupCheck::new(name.clone(), idx.iter().map(|&k| an[k]).collect(), numeric));
        }
        Ok(out)
    }
}

// ---- losses ----------------------------------------------------------------

mod loss {
    use super::*;
    use crate::losses::{
        gram as gram_op, l_global, l_patch, l_position, l_rgb, l_scaling, l_wrinkle, patch_anchors, ssim_var, FeatureBackend, ImageObjective,
        LossWeights, ToyConvBackend, WrinkleBackend,
    };

    const S: usize = 16;

    fn image_pair(seed: u64, salt: u64, s: usize) -> Vec<Leaf> {
        let mut r = rng(seed, salt);
        vec![leaf("pred", &[3, s, s], uniform(&mut r, 3 * s * s, 0.0, 1.0))]
    }

    fn gt(seed: u64, salt: u64, s: usize) -> Tensor {
        let mut r = rng(seed, salt ^ 0x6e);
        Tensor::new(vec![3, s, s], uniform(&mut r, 3 * s * s, 0.0, 1.0)).expect("sized")
    }

    pub fn rgb(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let g = gt(seed, 30, S);
        check_graph(seed, h, &no_params(), image_pair(seed, 30, S), &|t, _, v| {
            let gv = t.constant(g.clone());
            l_rgb(t, v[0], gv, 0.2)
        })
    }

    pub fn ssim(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let g = gt(seed, 31, S);
        check_graph(seed, h, &no_params(), image_pair(seed, 31, S), &|t, _, v| {
            let gv = t.constant(g.clone());
            ssim_var(t, v[0], gv)
        })
    }

    /// Position and scale hinges with every coordinate well away from the kink.
    pub fn hinges(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 32);
        let mu: Vec<f64> = (0..18)
            .map(|_| {
                let v = if r.random_bool(0.5) { r.random_range(1.1..2.0) } else { r.random_range(0.0..0.9) };
                if r.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let ls: Vec<f64> = (0..18)
            .map(|_| if r.random_bool(0.5) { r.random_range(-0.3..0.4) } else { r.random_range(-2.0..-0.7) })
            .collect();
        let leaves = vec![leaf("mu_local", &[6, 3], mu), leaf("log_s", &[6, 3], ls)];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| {
            let a = l_position(t, v[0], 1.0)?;
            let b = l_scaling(t, v[1], 0.6)?;
            cat_flat(t, &[a, b])
        })
    }

    pub fn gram(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 33);
        let leaves = vec![leaf("fmap", &[3, 4, 5], uniform(&mut r, 60, -1.0, 1.0))];
        check_graph(seed, h, &no_params(), leaves, &|t, _, v| gram_op(t, v[0]))
    }

    pub fn global(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let g = gt(seed, 34, S);
        let backend = ToyConvBackend::new(seed);
        check_graph(seed, h, &no_params(), image_pair(seed, 34, S), &|t, _, v| {
            let gv = t.constant(g.clone());
            let full = l_global(t, v[0], gv, &backend, None)?;
            let small = l_global(t, v[0], gv, &backend, Some((12, 10)))?;
            cat_flat(t, &[full, small])
        })
    }

    pub fn patch(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let g = gt(seed, 35, S);
        let backend = ToyConvBackend::new(seed);
        let anchors = patch_anchors(&vec![1.0; S * S], S, S, 8, 3, seed)?;
        check_graph(seed, h, &no_params(), image_pair(seed, 35, S), &|t, _, v| {
            let gv = t.constant(g.clone());
            l_patch(t, v[0], gv, &anchors, 8, &backend)
        })
    }

    pub fn wrinkle(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let g = gt(seed, 36, S);
        let backend = WrinkleBackend::default();
        check_graph(seed, h, &no_params(), image_pair(seed, 36, S), &|t, _, v| {
            let gv = t.constant(g.clone());
            l_wrinkle(t, v[0], gv, &backend)
        })
    }

    /// The weighted image objective used by fitting and refinement.
    pub fn objective(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let s = 12;
        let mut r = rng(seed, 37);
        let pred = uniform(&mut r, 3 * s * s, 0.0, 1.0);
        let g = uniform(&mut r, 3 * s * s, 0.0, 1.0);
        let mask: Vec<f64> = (0..s * s).map(|p| if (p % s) < 9 { 1.0 } else { 0.0 }).collect();
        let weights = LossWeights { lambda_p: 0.5, lambda_w: 2.0, ..LossWeights::default() };
        let backend = ToyConvBackend::new(seed);
        let wb = WrinkleBackend::default();
        let obj = ImageObjective {
            weights: &weights,
            backend: &backend as &dyn FeatureBackend,
            global_size: Some((8, 8)),
            global: true,
            patch: Some((6, 2, seed)),
            wrinkle: Some(&wb as &dyn FeatureBackend),
        };
        let (_, grad, _) = obj.evaluate(&pred, &g, &mask, s, s)?;
        let mut pick = rng(seed, 0xc0de);
        let idx = coords(&mut pick, pred.len());
        let (numeric, kink) = numeric_probe(|x| obj.evaluate(x, &g, &mask, s, s).map_or(f64::NAN, |e| e.0), &pred, h, &idx);
        Ok(vec![GroupCheck::new("pred", idx.iter().map(|&k| grad[k]).collect(), numeric).with_kink(kink)])
    }
}

// ---- sequence model ------------------------------------------------------------

mod seq {
    use super::*;
    use crate::sequence::{build_masks, row_norm_loss, Decoder, Encoder, Expr2Latent, ExpressionEncoder, SeqConfig};

    const T: usize = 3;

    fn config() -> SeqConfig {
        SeqConfig {
            feature_dim: 3,
            lip_dim: 4,
            wrinkle_dim: 2,
            expr_dim: 2,
            vertex_count: 2,
            encoder_width: 4,
            encoder_heads: 2,
            encoder_blocks: 1,
            decoder_width: 6,
            decoder_heads: 2,
            decoder_blocks: 1,
            decoder_ff: 8,
        }
    }

    pub fn encoder(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 40);
        let enc = Encoder::new("enc", 3, 4, 2, 2, 4, &mut r);
        let leaves = vec![leaf("x", &[T, 3], uniform(&mut r, T * 3, -1.0, 1.0))];
        check_graph(seed, h, &enc.params, leaves, &|t, b, v| {
            let (f, head) = enc.forward(t, b, v[0])?;
            cat_flat(t, &[f, head])
        })
    }

    pub fn expression(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 41);
        let m = ExpressionEncoder::new(4, 2, &mut r);
        let leaves = vec![leaf("cw", &[T, 4], uniform(&mut r, T * 4, -1.0, 1.0))];
        check_graph(seed, h, &m.params, leaves, &|t, b, v| m.forward(t, b, v[0]))
    }

    pub fn e2l(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 42);
        let m = Expr2Latent::new(2, 3, &mut r);
        let leaves = vec![leaf("e", &[T, 2], uniform(&mut r, T * 2, -1.0, 1.0))];
        check_graph(seed, h, &m.params, leaves, &|t, b, v| m.forward(t, b, v[0]))
    }

    pub fn decoder(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 43);
        let cfg = config();
        let d = Decoder::new(&cfg, &mut r);
        let masks = build_masks(T);
        let leaves = vec![
            leaf("history", &[T, 6], uniform(&mut r, T * 6, -1.0, 1.0)),
            leaf("memory", &[T, 6], uniform(&mut r, T * 6, -1.0, 1.0)),
        ];
        check_graph(seed, h, &d.params, leaves, &|t, b, v| d.forward(t, b, v[0], v[1], &masks))
    }

    /// Teacher-forced vertex loss through Expression2Latent and the decoder.
    pub fn vertex_loss(seed: u64, h: f64) -> Result<Vec<GroupCheck>> {
        let mut r = rng(seed, 44);
        let cfg = config();
        let d = Decoder::new(&cfg, &mut r);
        let m = Expr2Latent::new(cfg.expr_dim, cfg.latent_width(), &mut r);
        let n_d = d.params.len();
        let mut params = d.params.clone();
        for (name, t) in m.params.names().iter().zip(m.params.tensors()) {
            params.add(name.clone(), t.clone());
        }
        let masks = build_masks(T);
        let c = Tensor::new(vec![T, cfg.encoder_width], uniform(&mut r, T * cfg.encoder_width, -1.0, 1.0))?;
        let e = Tensor::new(vec![T, cfg.expr_dim], uniform(&mut r, T * cfg.expr_dim, -1.0, 1.0))?;
        let hist = Tensor::new(vec![T, 6], uniform(&mut r, T * 6, -1.0, 1.0))?;
        let gt = Tensor::new(vec![T, 6], uniform(&mut r, T * 6, -1.0, 1.0))?;
        check_graph(seed, h, &params, Vec::new(), &|t, b, _| {
            let (db, eb) = b.split(n_d);
            let cv = t.constant(c.clone());
            let ev = t.constant(e.clone());
            let lat = m.forward(t, &eb, ev)?;
            let mem = t.concat_cols(&[cv, lat])?;
            let hv = t.constant(hist.clone());
            let out = d.forward(t, &db, hv, mem, &masks)?;
            let g = t.constant(gt.clone());
            row_norm_loss(t, out, g)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_definition() {
        assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_err(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
        assert_eq!(rel_err(&[f64::NAN], &[1.0]), f64::INFINITY);
    }

    #[test]
    fn every_suite_passes_a_few_seeds() {
        for s in suites() {
            for seed in 0..3 {
                let r = s.run(seed, None).unwrap();
                assert!(r.passed, "{s:?} seed {seed}: {} at {}", r.err, r.worst_group);
            }
        }
    }

    #[test]
    fn probe_flags_kinks_inside_the_stencil() {
        let (g, kink) = numeric_probe(|x| x[0].abs(), &[2e-6], 1e-5, &[0]);
        assert!((g[0] - 0.2).abs() < 1e-9);
        assert!(!GroupCheck::new("x", vec![1.0], g).with_kink(kink).resolvable(TOL));
        let (g, kink) = numeric_probe(|x| x[0] * x[0], &[0.5], 1e-5, &[0]);
        assert!(GroupCheck::new("x", vec![1.0], g).with_kink(kink).resolvable(TOL));
    }

    #[test]
    fn wrong_sign_is_caught() {
        for s in suites() {
            let r = s.run(0, Some(Fault::FlipSign)).unwrap();
            assert!(!r.passed, "{s:?} missed an injected sign flip");
        }
    }

    #[test]
    fn selectors() {
        assert_eq!(select("all").unwrap().len(), suites().len());
        assert!(select("raster").unwrap().iter().all(|s| s.component == "raster"));
        assert_eq!(select("tensor/matmul").unwrap().len(), 1);
        assert!(select("nothing").is_err());
        let comps: std::collections::BTreeSet<_> = suites().iter().map(|s| s.component).collect();
        assert_eq!(comps.len(), COMPONENTS.len());
    }
}
