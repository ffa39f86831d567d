//! Photometric, perceptual and regularization losses plus image metrics.
//!
//! Images enter as `3×H×W` tape variables in `[0, 1]`.

mod backend;

pub use backend::{FeatureBackend, ToyConvBackend, WrinkleBackend};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_pos: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
    pub lambda_p: f64,
    pub lambda_w: f64,
    pub lambda_dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pos: 0.01,
            lambda_s: 1.0,
            lambda_g: 1.0,
            lambda_p: 0.001,
            lambda_w: 10.0,
            lambda_dssim: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pos, self.lambda_s, self.lambda_g, self.lambda_p, self.lambda_w, self.lambda_dssim];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.lambda_dssim > 1.0 {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn same_image_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    if tape.shape(a).len() != 3 {
        return Err(Error::shape(op, format!("expected C×H×W images, got {:?}", tape.shape(a))));
    }
    Ok(())
}

/// Mean SSIM over pixels and channels (11×11 Gaussian window, σ = 1.5, reflect padding).
pub fn ssim_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_image_shape(tape, a, b, "ssim")?;
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let mu_a = tape.blur(a, &k)?;
    let mu_b = tape.blur(b, &k)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let e_aa = tape.blur(aa, &k)?;
    let e_bb = tape.blur(bb, &k)?;
    let e_ab = tape.blur(ab, &k)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let n1 = tape.scale(mu_ab, 2.0);
    let n1 = tape.add_const(n1, SSIM_C1);
    let n2 = tape.scale(cov, 2.0);
    let n2 = tape.add_const(n2, SSIM_C2);
    let d1 = tape.add(mu_aa, mu_bb)?;
    let d1 = tape.add_const(d1, SSIM_C1);
    let d2 = tape.add(var_a, var_b)?;
    let d2 = tape.add_const(d2, SSIM_C2);
    let num = tape.mul(n1, n2)?;
    let den = tape.mul(d1, d2)?;
    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

fn image_tensor(data: &[f64], c: usize, h: usize, w: usize) -> Result<Tensor> {
    Tensor::new(vec![c, h, w], data.to_vec())
}

/// SSIM of two channel-planar RGB images.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    let mut t = Tape::new();
    let av = t.constant(image_tensor(a, 3, h, w)?);
    let bv = t.constant(image_tensor(b, 3, h, w)?);
    let s = ssim_var(&mut t, av, bv)?;
    Ok(t.value(s).item())
}

/// `10·log10(1/MSE)`, capped at 99 dB.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs equal sizes");
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

/// `mean|a − b|`.
pub fn l1_mean(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// `(1−λ)·mean|pred−gt| + λ·(1−SSIM)/2`.
pub fn l_rgb(tape: &mut Tape, pred: Var, gt: Var, lambda_dssim: f64) -> Result<Var> {
    same_image_shape(tape, pred, gt, "l_rgb")?;
    let l1 = l1_mean(tape, pred, gt)?;
    let s = ssim_var(tape, pred, gt)?;
    let d = tape.scale(s, -0.5);
    let d = tape.add_const(d, 0.5);
    let a = tape.scale(l1, 1.0 - lambda_dssim);
    let b = tape.scale(d, lambda_dssim);
    tape.add(a, b)
}

/// `Σ_i ‖relu(|x_i| − ε)‖₂` over the rows of a `G×3` tensor.
pub fn hinge_norm(tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
    let a = tape.abs(x);
    let a = tape.add_const(a, -eps);
    let r = tape.relu(a);
    let n = tape.row_norms(r)?;
    Ok(tape.sum(n))
}

/// Hinge on local offsets `μ` (`G×3`).
pub fn l_position(tape: &mut Tape, mu_local: Var, eps: f64) -> Result<Var> {
    hinge_norm(tape, mu_local, eps)
}

/// Hinge on local scales `exp(log_s)` (`G×3`).
pub fn l_scaling(tape: &mut Tape, log_s: Var, eps: f64) -> Result<Var> {
    let s = tape.exp(log_s);
    hinge_norm(tape, s, eps)
}

/// `F·Fᵀ / (C·H·W)` with `F` the `C×HW` flattening.
pub fn gram(tape: &mut Tape, fmap: Var) -> Result<Var> {
    let (c, h, w) = match tape.shape(fmap) {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape("gram", format!("expected C×H×W, got {s:?}"))),
    };
    let f = tape.reshape(fmap, &[c, h * w])?;
    let ft = tape.transpose(f)?;
    let g = tape.matmul(f, ft)?;
    Ok(tape.scale(g, 1.0 / (c * h * w) as f64))
}

fn features_pair(
    tape: &mut Tape,
    backend: &dyn FeatureBackend,
    pred: Var,
    gt: Var,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let fp = backend.features(tape, pred)?;
    let fg = backend.features(tape, gt)?;
    if fp.len() != fg.len() || fp.iter().zip(&fg).any(|(a, b)| tape.shape(*a) != tape.shape(*b)) {
        return Err(Error::shape("features", "backend produced different layouts for the two images"));
    }
    Ok((fp, fg))
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = match terms.first() {
        Some(&v) => v,
        None => return Ok(tape.constant(Tensor::scalar(0.0))),
    };
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `Σ_k mean|φ_k(pred) − φ_k(gt)|`.
pub fn content_loss(tape: &mut Tape, pred: Var, gt: Var, backend: &dyn FeatureBackend) -> Result<Var> {
    let (fp, fg) = features_pair(tape, backend, pred, gt)?;
    let terms = fp
        .iter()
        .zip(&fg)
        .map(|(&a, &b)| l1_mean(tape, a, b))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(tape, &terms)
}

/// Content plus Gram-matrix style loss, optionally after resizing both images to `size`.
pub fn l_global(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    backend: &dyn FeatureBackend,
    size: Option<(usize, usize)>,
) -> Result<Var> {
    same_image_shape(tape, pred, gt, "l_global")?;
    let (pred, gt) = match size {
        Some((h, w)) => (tape.resize(pred, h, w)?, tape.resize(gt, h, w)?),
        None => (pred, gt),
    };
    let (fp, fg) = features_pair(tape, backend, pred, gt)?;
    let mut terms = Vec::with_capacity(2 * fp.len());
    for (&a, &b) in fp.iter().zip(&fg) {
        terms.push(l1_mean(tape, a, b)?);
        let ga = gram(tape, a)?;
        let gb = gram(tape, b)?;
        terms.push(l1_mean(tape, ga, gb)?);
    }
    sum_vars(tape, &terms)
}

/// Top-left corners of `n` square patches whose centres fall on `mask > 0.5`,
/// sampled uniformly with replacement; depends only on `(mask, seed)`.
pub fn patch_anchors(mask: &[f64], h: usize, w: usize, patch: usize, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if mask.len() != h * w {
        return Err(Error::shape("patch_anchors", format!("mask of {} for {h}×{w}", mask.len())));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::NoPatchAnchor);
    }
    let half = patch / 2;
    let mut valid = Vec::new();
    for y in half..=h - patch + half {
        for x in half..=w - patch + half {
            if mask[y * w + x] > 0.5 {
                valid.push((y - half, x - half));
            }
        }
    }
    if valid.is_empty() {
        return Err(Error::NoPatchAnchor);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| valid[rng.random_range(0..valid.len())]).collect())
}

/// Mean over patches of the backend content loss.
pub fn l_patch(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    anchors: &[(usize, usize)],
    patch: usize,
    backend: &dyn FeatureBackend,
) -> Result<Var> {
    same_image_shape(tape, pred, gt, "l_patch")?;
    if anchors.is_empty() {
        return Err(Error::NoPatchAnchor);
    }
    let mut terms = Vec::with_capacity(anchors.len());
    for &(y0, x0) in anchors {
        let p = tape.crop(pred, y0, x0, patch, patch)?;
        let g = tape.crop(gt, y0, x0, patch, patch)?;
        terms.push(content_loss(tape, p, g, backend)?);
    }
    let s = sum_vars(tape, &terms)?;
    Ok(tape.scale(s, 1.0 / anchors.len() as f64))
}

pub fn l_wrinkle(tape: &mut Tape, pred: Var, gt: Var, backend: &dyn FeatureBackend) -> Result<Var> {
    same_image_shape(tape, pred, gt, "l_wrinkle")?;
    content_loss(tape, pred, gt, backend)
}

/// Sub-losses of one fitting step; absent terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub rgb: Option<Var>,
    pub position: Option<Var>,
    pub scaling: Option<Var>,
    pub global: Option<Var>,
    pub patch: Option<Var>,
    pub wrinkle: Option<Var>,
}

fn weighted(tape: &mut Tape, parts: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut terms = Vec::new();
    for &(v, w) in parts {
        if let Some(v) = v {
            terms.push(if w == 1.0 { v } else { tape.scale(v, w) });
        }
    }
    sum_vars(tape, &terms)
}

/// `L_rgb + λpos·L_position + λs·L_scaling + λg·L_global + λp·L_patch + λw·L_wrinkle`.
pub fn l_total(tape: &mut Tape, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    weighted(
        tape,
        &[
            (t.rgb, 1.0),
            (t.position, w.lambda_pos),
            (t.scaling, w.lambda_s),
            (t.global, w.lambda_g),
            (t.patch, w.lambda_p),
            (t.wrinkle, w.lambda_w),
        ],
    )
}

/// `Σ_t (L_rgb + λg·L_global + λp·L_patch)_t`.
pub fn l_photo(tape: &mut Tape, frames: &[LossTerms], w: &LossWeights) -> Result<Var> {
    let per = frames
        .iter()
        .map(|t| weighted(tape, &[(t.rgb, 1.0), (t.global, w.lambda_g), (t.patch, w.lambda_p)]))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(tape, &per)
}

/// Image terms of one rendered view, each optional except `L_rgb`.
#[derive(Clone, Copy)]
pub struct ImageObjective<'a> {
    pub weights: &'a LossWeights,
    pub backend: &'a dyn FeatureBackend,
    /// Resolution for the global term; `None` keeps the input size.
    pub global_size: Option<(usize, usize)>,
    pub global: bool,
    /// `(side, count, seed)` of the patch term.
    pub patch: Option<(usize, usize, u64)>,
    pub wrinkle: Option<&'a dyn FeatureBackend>,
}

/// Unweighted per-term values of one [`ImageObjective`] evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageTerms {
    pub rgb: f64,
    pub global: f64,
    pub patch: f64,
    pub wrinkle: f64,
}

impl ImageObjective<'_> {
    /// Weighted loss, its gradient w.r.t. `pred` and the unweighted terms.
    pub fn evaluate(&self, pred: &[f64], gt: &[f64], mask: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>, ImageTerms)> {
        let mut tape = Tape::new();
        let p = tape.param(image_tensor(pred, 3, h, w)?);
        let g = tape.constant(image_tensor(gt, 3, h, w)?);
        let rgb = l_rgb(&mut tape, p, g, self.weights.lambda_dssim)?;
        let mut terms = LossTerms { rgb: Some(rgb), ..LossTerms::default() };
        if self.global {
            terms.global = Some(l_global(&mut tape, p, g, self.backend, self.global_size)?);
        }
        if let Some((side, count, seed)) = self.patch {
            let anchors = patch_anchors(mask, h, w, side, count, seed)?;
            terms.patch = Some(l_patch(&mut tape, p, g, &anchors, side, self.backend)?);
        }
        if let Some(wb) = self.wrinkle {
            terms.wrinkle = Some(l_wrinkle(&mut tape, p, g, wb)?);
        }
        let total = l_total(&mut tape, &terms, self.weights)?;
        let value = tape.value(total).item();
        if !value.is_finite() {
            return Err(Error::NonFinite("image loss".into()));
        }
        tape.backward(total)?;
        let grad = tape.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; pred.len()]);
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let parts = ImageTerms { rgb: get(terms.rgb), global: get(terms.global), patch: get(terms.patch), wrinkle: get(terms.wrinkle) };
        Ok((value, grad, parts))
    }
}
