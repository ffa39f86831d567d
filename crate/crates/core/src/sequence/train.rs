use serde::{Deserialize, Serialize};

use super::dataset::SequenceData;
use super::model::shift_history;
use super::{build_masks, frequency_interpolate, SequenceModel, FRAME_RATE};
use crate::color::{ColorModel, ColorTrain};
use crate::error::{Error, Result};
use crate::losses::{FeatureBackend, ImageObjective, LossWeights, WrinkleBackend};
use crate::math::Vec3;
use crate::mesh::{triangle_frames, BlendMesh};
use crate::raster::{render_backward, render_global, view_dirs, Camera, RenderSettings};
use crate::seed::derive_seed;
use crate::splats::{to_global, RiggedGaussianSet};
use crate::tensor::{Adam, AdamConfig, AdamSlot, Bound, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeqTrainConfig {
    pub lr: f64,
    /// Steps spent on each encoder before the decoder stage.
    pub pretrain_steps: usize,
    /// Vertex-only steps before alternation starts.
    pub warmup_steps: usize,
    /// Alternation rounds; each visits every sequence once with an (a) and a (b) step.
    pub rounds: usize,
    pub color_lr: f64,
    pub latent_lr: f64,
    /// Camera whose frames provide the wrinkle-feature targets.
    pub wrinkle_camera: usize,
    pub patch_size: usize,
    pub patch_count: usize,
    pub global_size: Option<[usize; 2]>,
    pub seed: u64,
}

impl Default for SeqTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            pretrain_steps: 10_000,
            warmup_steps: 2000,
            rounds: 100,
            color_lr: 2e-3,
            latent_lr: 2e-3,
            wrinkle_camera: 0,
            patch_size: 16,
            patch_count: 4,
            global_size: None,
            seed: 0,
        }
    }
}

/// Training view of one sequence, resampled to the frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqSample {
    pub frames: usize,
    pub features: Vec<f64>,
    /// `T×3·|lip|` lip-vertex offsets.
    pub lip: Vec<f64>,
    /// `T×W` pooled wrinkle features.
    pub wrinkle: Vec<f64>,
    pub expr: Vec<f64>,
    /// `T×3V` offsets from the template.
    pub offsets: Vec<f64>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Vec<(Vec<f64>, Vec<f64>)>>,
}

impl SeqSample {
    pub fn from_data(data: &SequenceData, mesh: &BlendMesh, wrinkle: &WrinkleBackend, wrinkle_camera: usize) -> Result<Self> {
        if data.vertex_count != mesh.vertex_count() || data.expr_dim != mesh.expr_dim {
            return Err(Error::shape("sequence_sample", "dataset does not match the mesh"));
        }
        let feats = frequency_interpolate(&data.features, FRAME_RATE)?;
        if feats.frames != data.frames {
            return Err(Error::shape(
                "sequence_sample",
                format!("{} resampled feature frames for {} video frames", feats.frames, data.frames),
            ));
        }
        let t = data.frames;
        let mut offsets = Vec::with_capacity(data.vertices.len());
        let mut lip = Vec::with_capacity(t * 3 * mesh.lip_vertex_ids.len());
        for f in 0..t {
            let row = data.vertex_row(f);
            for (v, tv) in mesh.template.iter().enumerate() {
                for c in 0..3 {
                    offsets.push(row[3 * v + c] - tv[c]);
                }
            }
            let base = f * 3 * mesh.vertex_count();
            for &v in &mesh.lip_vertex_ids {
                lip.extend_from_slice(&offsets[base + 3 * v..base + 3 * v + 3]);
            }
        }
        let cam = data.cameras.get(wrinkle_camera).ok_or_else(|| Error::Invalid(format!("no camera {wrinkle_camera}")))?;
        let mut wr = Vec::new();
        for (rgb, _) in &data.images[wrinkle_camera] {
            wr.extend(wrinkle.pooled(rgb, cam.height, cam.width)?);
        }
        Ok(Self {
            frames: t,
            features: feats.data,
            lip,
            wrinkle: wr,
            expr: data.expr.clone(),
            offsets,
            cameras: data.cameras.clone(),
            images: data.images.clone(),
        })
    }
}

/// Optimizer state of the sequence stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTrainer {
    pub config: SeqTrainConfig,
    pub lip: Adam,
    pub wrinkle: Adam,
    pub expr: Adam,
    pub e2l: Adam,
    pub decoder: Adam,
    pub color: Adam,
    pub latent: AdamSlot,
    pub steps_a: u64,
    pub steps_b: u64,
    /// Position in the overall schedule (see [`phase_at`]).
    pub step: u64,
}

impl SeqTrainer {
    pub fn new(config: SeqTrainConfig, model: &SequenceModel, color: &ColorModel, set: &RiggedGaussianSet) -> Self {
        let adam = AdamConfig::default();
        Self {
            config,
            lip: Adam::new(&model.lip.params, adam),
            wrinkle: Adam::new(&model.wrinkle.params, adam),
            expr: Adam::new(&model.expr.params, adam),
            e2l: Adam::new(&model.e2l.params, adam),
            decoder: Adam::new(&model.decoder.params, adam),
            color: Adam::new(&color.params, adam),
            latent: AdamSlot::new(set.latent.len()),
            steps_a: 0,
            steps_b: 0,
            step: 0,
        }
    }
}

/// `Σ_t ‖pred_t − gt_t‖₂` over the rows of `T×K` tensors.
pub fn row_norm_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    let d = tape.sub(pred, gt)?;
    let n = tape.row_norms(d)?;
    Ok(tape.sum(n))
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} loss")))
    }
}

fn matrix(tape: &mut Tape, data: &[f64], t: usize) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![t, data.len() / t], data.to_vec())?))
}

fn update(params: &mut ParamSet, opt: &mut Adam, bound: &Bound, tape: &Tape, lr: f64) {
    let grads = bound.grads(tape);
    opt.step(params, &grads, lr);
}

/// One step of each encoder's supervised objective, in order lip → wrinkle → expression.
fn pretrain_step(model: &mut SequenceModel, tr: &mut SeqTrainer, s: &SeqSample, stage: usize) -> Result<f64> {
    let t = s.frames;
    let lr = tr.config.lr;
    let mut tape = Tape::new();
    let x = matrix(&mut tape, &s.features, t)?;
    match stage {
        0 => {
            let b = model.lip.params.bind(&mut tape);
            let (_, head) = model.lip.forward(&mut tape, &b, x)?;
            let gt = matrix(&mut tape, &s.lip, t)?;
            let l = row_norm_loss(&mut tape, head, gt)?;
            let v = finite(tape.value(l).item(), "lip")?;
            tape.backward(l)?;
            update(&mut model.lip.params, &mut tr.lip, &b, &tape, lr);
            Ok(v)
        }
        1 => {
            let lb = model.lip.params.bind_frozen(&mut tape);
            let (c, _) = model.lip.forward(&mut tape, &lb, x)?;
            let xc = tape.concat_cols(&[x, c])?;
            let b = model.wrinkle.params.bind(&mut tape);
            let (_, head) = model.wrinkle.forward(&mut tape, &b, xc)?;
            let gt = matrix(&mut tape, &s.wrinkle, t)?;
            let l = row_norm_loss(&mut tape, head, gt)?;
            let v = finite(tape.value(l).item(), "wrinkle")?;
            tape.backward(l)?;
            update(&mut model.wrinkle.params, &mut tr.wrinkle, &b, &tape, lr);
            Ok(v)
        }
        _ => {
            let (c, w, _) = model.encode(&s.features, t)?;
            let cv = matrix(&mut tape, &c, t)?;
            let wv = matrix(&mut tape, &w, t)?;
            let cw = tape.concat_cols(&[cv, wv])?;
            let b = model.expr.params.bind(&mut tape);
            let e = model.expr.forward(&mut tape, &b, cw)?;
            let gt = matrix(&mut tape, &s.expr, t)?;
            let l = row_norm_loss(&mut tape, e, gt)?;
            let v = finite(tape.value(l).item(), "expression")?;
            tape.backward(l)?;
            update(&mut model.expr.params, &mut tr.expr, &b, &tape, lr);
            Ok(v)
        }
    }
}

/// Trains the lip, wrinkle and expression encoders in sequence; returns their loss curves.
pub fn pretrain_encoders(model: &mut SequenceModel, tr: &mut SeqTrainer, samples: &[SeqSample]) -> Result<[Vec<f64>; 3]> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let mut curves: [Vec<f64>; 3] = Default::default();
    for (stage, curve) in curves.iter_mut().enumerate() {
        for step in 0..tr.config.pretrain_steps {
            curve.push(pretrain_step(model, tr, &samples[step % samples.len()], stage)?);
        }
    }
    Ok(curves)
}

/// Where a global step falls in the schedule
/// pretrain (lip, wrinkle, expression) → warm-up → alternation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqPhase {
    Pretrain { stage: usize, index: usize },
    Warmup { index: usize },
    Alternate { round: usize, sequence: usize },
    Done,
}

pub fn phase_at(cfg: &SeqTrainConfig, sequences: usize, step: u64) -> SeqPhase {
    let mut s = step as usize;
    let p = cfg.pretrain_steps;
    if s < 3 * p {
        return SeqPhase::Pretrain { stage: s / p, index: s % p };
    }
    s -= 3 * p;
    if s < cfg.warmup_steps {
        return SeqPhase::Warmup { index: s };
    }
    s -= cfg.warmup_steps;
    if sequences > 0 && s < cfg.rounds * sequences {
        return SeqPhase::Alternate { round: s / sequences, sequence: s % sequences };
    }
    SeqPhase::Done
}

/// Total scheduled steps.
pub fn schedule_len(cfg: &SeqTrainConfig, sequences: usize) -> u64 {
    (3 * cfg.pretrain_steps + cfg.warmup_steps + cfg.rounds * sequences) as u64
}

/// Losses of one scheduled step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqStepLog {
    pub step: u64,
    pub phase: SeqPhase,
    /// Encoder loss during pretraining.
    pub encoder: Option<f64>,
    pub vertices: Option<f64>,
    pub photo: Option<f64>,
    pub camera: Option<usize>,
}

/// Runs the step `tr.step` of the schedule and advances it.
pub fn run_step(
    model: &mut SequenceModel,
    color: &mut ColorModel,
    set: &mut RiggedGaussianSet,
    ctx: &PhotoContext,
    tr: &mut SeqTrainer,
    samples: &[SeqSample],
) -> Result<SeqStepLog> {
    if samples.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    let step = tr.step;
    let phase = phase_at(&tr.config, samples.len(), step);
    let mut log = SeqStepLog { step, phase, encoder: None, vertices: None, photo: None, camera: None };
    match phase {
        SeqPhase::Pretrain { stage, index } => {
            log.encoder = Some(pretrain_step(model, tr, &samples[index % samples.len()], stage)?);
        }
        SeqPhase::Warmup { index } => {
            log.vertices = Some(step_a(model, tr, &samples[index % samples.len()])?);
        }
        SeqPhase::Alternate { round, sequence } => {
            let s = &samples[sequence];
            log.vertices = Some(step_a(model, tr, s)?);
            let cam = (round + sequence) % s.cameras.len().max(1);
            log.photo = Some(step_b(model, color, set, ctx, tr, s, cam)?);
            log.camera = Some(cam);
        }
        SeqPhase::Done => return Err(Error::Invalid(format!("step {step} is past the end of the schedule"))),
    }
    tr.step += 1;
    Ok(log)
}

/// Vertex step: updates Expression2Latent and the decoder on `L_vertices` (teacher forced).
pub fn step_a(model: &mut SequenceModel, tr: &mut SeqTrainer, s: &SeqSample) -> Result<f64> {
    let t = s.frames;
    let (c, _, e) = model.encode(&s.features, t)?;
    let mut tape = Tape::new();
    let cv = matrix(&mut tape, &c, t)?;
    let ev = matrix(&mut tape, &e, t)?;
    let eb = model.e2l.params.bind(&mut tape);
    let lat = model.e2l.forward(&mut tape, &eb, ev)?;
    let mem = tape.concat_cols(&[cv, lat])?;
    let v3 = model.decoder.output_width();
    let hist = matrix(&mut tape, &shift_history(&s.offsets, v3), t)?;
    let db = model.decoder.params.bind(&mut tape);
    let out = model.decoder.forward(&mut tape, &db, hist, mem, &build_masks(t))?;
    let gt = matrix(&mut tape, &s.offsets, t)?;
    let l = row_norm_loss(&mut tape, out, gt)?;
    let v = finite(tape.value(l).item(), "vertex")?;
    tape.backward(l)?;
    update(&mut model.e2l.params, &mut tr.e2l, &eb, &tape, tr.config.lr);
    update(&mut model.decoder.params, &mut tr.decoder, &db, &tape, tr.config.lr);
    tr.steps_a += 1;
    Ok(v)
}

/// Fixed inputs of the photometric step.
pub struct PhotoContext<'a> {
    pub mesh: &'a BlendMesh,
    pub settings: RenderSettings,
    pub weights: LossWeights,
    pub backend: &'a dyn FeatureBackend,
}

fn geometry(set: &RiggedGaussianSet) -> (Vec<Vec3>, Vec<[f64; 4]>, Vec<Vec3>, Vec<f64>, Vec<usize>) {
    (set.mu_local.clone(), set.q_local.clone(), set.log_s.clone(), set.opacity_logit.clone(), set.parent_face.clone())
}

/// Renders the predicted sequence from `camera` and accumulates `L_photo`;
/// with `train` the color network and latents receive one Adam step.
fn photo_pass(
    model: &SequenceModel,
    color: &mut ColorModel,
    set: &mut RiggedGaussianSet,
    ctx: &PhotoContext,
    tr: Option<&mut SeqTrainer>,
    s: &SeqSample,
    camera: usize,
) -> Result<f64> {
    let t = s.frames;
    let pred = model.predict(&s.features, t)?;
    let cam = s.cameras.get(camera).ok_or_else(|| Error::Invalid(format!("no camera {camera}")))?;
    let (h, w) = (cam.height, cam.width);
    let v = ctx.mesh.vertex_count();
    let e_dim = model.config.expr_dim;
    let zero_psi = vec![0.0; ctx.mesh.expr_dim];
    let training = tr.is_some();
    let step_seed = tr.as_ref().map_or(0, |tr| derive_seed(tr.config.seed, &[2, tr.steps_b]));
    let patch = tr.as_ref().map(|tr| (tr.config.patch_size, tr.config.patch_count));
    let global_size = tr.as_ref().and_then(|tr| tr.config.global_size.map(|[a, b]| (a, b)));

    let mut tape = Tape::new();
    let train = ColorTrain { weights: training, latent: training, ..ColorTrain::NONE };
    let bound = if train.weights { color.params.bind(&mut tape) } else { color.params.bind_frozen(&mut tape) };
    let g = set.len();
    let lat_t = Tensor::new(vec![g, set.latent_dim], set.latent.clone())?;
    let lat = if train.latent { tape.param(lat_t) } else { tape.constant(lat_t) };

    let mut total = 0.0;
    for f in 0..t {
        let offs: Vec<Vec3> = pred.offsets[f * 3 * v..(f + 1) * 3 * v].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let verts = ctx.mesh.evaluate(&zero_psi, Some(&offs))?;
        let frames = triangle_frames(&verts, &ctx.mesh.faces)?;
        let global = to_global(set, &frames);
        let (colors_v, colors) = match &set.static_rgb {
            Some(rgb) => (None, rgb.clone()),
            None => {
                let dirs = view_dirs(&global, cam);
                let psi = tape.constant(Tensor::new(vec![1, e_dim], pred.expr[f * e_dim..(f + 1) * e_dim].to_vec())?);
                let dv = tape.constant(Tensor::new(vec![g, 3], dirs.iter().flatten().copied().collect())?);
                let cv = color.forward(&mut tape, &bound, psi, lat, dv)?;
                let vals = tape.value(cv).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
                (Some(cv), vals)
            }
        };
        let out = render_global(&global, &colors, cam, &ctx.settings)?;
        let (rgb_gt, alpha_gt) = &s.images[camera][f];
        let obj = ImageObjective {
            weights: &ctx.weights,
            backend: ctx.backend,
            global_size,
            global: ctx.weights.lambda_g > 0.0,
            patch: patch.filter(|_| ctx.weights.lambda_p > 0.0).map(|(side, n)| (side, n, derive_seed(step_seed, &[f as u64]))),
            wrinkle: None,
        };
        let (loss, grad, _) = obj.evaluate(&out.rgb, rgb_gt, alpha_gt, h, w)?;
        total += loss;
        if let (true, Some(cv)) = (training, colors_v) {
            let rg = render_backward(&out, &grad, None)?;
            let seed: Vec<f64> = rg.colors.iter().flatten().copied().collect();
            tape.backward_with(cv, &seed)?;
        }
    }
    finite(total, "photometric")?;
    if let Some(tr) = tr {
        if set.static_rgb.is_none() {
            let before = geometry(set);
            update(&mut color.params, &mut tr.color, &bound, &tape, tr.config.color_lr);
            if let Some(gz) = tape.grad(lat) {
                let gz = gz.to_vec();
                tr.latent.update(&mut set.latent, &gz, tr.config.latent_lr, &tr.color.config);
            }
            if geometry(set) != before {
                return Err(Error::Invalid("refinement step modified frozen splat geometry".into()));
            }
        }
        tr.steps_b += 1;
    }
    Ok(total)
}

/// Photometric step: refines the color network and per-splat latents only.
pub fn step_b(
    model: &SequenceModel,
    color: &mut ColorModel,
    set: &mut RiggedGaussianSet,
    ctx: &PhotoContext,
    tr: &mut SeqTrainer,
    s: &SeqSample,
    camera: usize,
) -> Result<f64> {
    photo_pass(model, color, set, ctx, Some(tr), s, camera)
}

/// `L_photo` of the predicted sequence seen from `camera`, without updates.
pub fn photo_loss(
    model: &SequenceModel,
    color: &ColorModel,
    set: &RiggedGaussianSet,
    ctx: &PhotoContext,
    s: &SeqSample,
    camera: usize,
) -> Result<f64> {
    let mut c = color.clone();
    let mut st = set.clone();
    photo_pass(model, &mut c, &mut st, ctx, None, s, camera)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlternatingLog {
    pub vertices: Vec<f64>,
    pub photo: Vec<f64>,
}

/// Warm-up on `L_vertices`, then strict (a), (b) alternation over all sequences.
/// Starts from the first non-pretraining step of the schedule.
pub fn alternating_train(
    model: &mut SequenceModel,
    color: &mut ColorModel,
    set: &mut RiggedGaussianSet,
    ctx: &PhotoContext,
    tr: &mut SeqTrainer,
    samples: &[SeqSample],
) -> Result<AlternatingLog> {
    tr.step = tr.step.max(3 * tr.config.pretrain_steps as u64);
    let end = schedule_len(&tr.config, samples.len());
    let mut log = AlternatingLog::default();
    while tr.step < end {
        let r = run_step(model, color, set, ctx, tr, samples)?;
        log.vertices.extend(r.vertices);
        log.photo.extend(r.photo);
    }
    Ok(log)
}

/// `sqrt(mean_{t,v} ‖pred − gt‖²)` over `T×3V` offsets.
pub fn vertex_rms(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() / 3;
    (pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64).sqrt()
}

/// Largest per-vertex displacement norm in `T×3V` offsets.
pub fn motion_amplitude(offsets: &[f64]) -> f64 {
    offsets.chunks(3).map(|c| (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::SeqConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_sample(t: usize, cfg: &SeqConfig, r: &mut ChaCha8Rng) -> SeqSample {
        let v3 = 3 * cfg.vertex_count;
        let feats: Vec<f64> = (0..t * cfg.feature_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let offsets: Vec<f64> = (0..t * v3).map(|i| 0.1 * feats[i % feats.len()]).collect();
        SeqSample {
            frames: t,
            lip: (0..t * cfg.lip_dim).map(|i| feats[i % feats.len()] * 0.5).collect(),
            wrinkle: (0..t * cfg.wrinkle_dim).map(|i| feats[(i * 3) % feats.len()].abs()).collect(),
            expr: (0..t * cfg.expr_dim).map(|i| feats[i % feats.len()]).collect(),
            features: feats,
            offsets,
            cameras: vec![],
            images: vec![],
        }
    }

    fn small() -> SeqConfig {
        SeqConfig {
            feature_dim: 4,
            lip_dim: 6,
            wrinkle_dim: 3,
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

    #[test]
    fn row_norm_loss_is_zero_at_match() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let l = row_norm_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let b = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 8.0, 10.0]).unwrap());
        let l = row_norm_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 5.0);
    }

    #[test]
    fn step_a_touches_only_e2l_and_decoder() {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let cfg = small();
        let mut m = SequenceModel::new(cfg.clone(), &mut r).unwrap();
        let color = ColorModel::new(3, 2, 8, &mut r);
        let set = RiggedGaussianSet::empty(2);
        let mut tr = SeqTrainer::new(SeqTrainConfig::default(), &m, &color, &set);
        let s = toy_sample(5, &cfg, &mut r);
        let before = m.clone();
        step_a(&mut m, &mut tr, &s).unwrap();
        assert_eq!(m.lip, before.lip);
        assert_eq!(m.wrinkle, before.wrinkle);
        assert_eq!(m.expr, before.expr);
        assert_ne!(m.e2l, before.e2l);
        assert_ne!(m.decoder, before.decoder);
    }

    #[test]
    fn pretraining_reduces_each_encoder_loss() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let cfg = small();
        let mut m = SequenceModel::new(cfg.clone(), &mut r).unwrap();
        let color = ColorModel::new(3, 2, 8, &mut r);
        let set = RiggedGaussianSet::empty(2);
        let tc = SeqTrainConfig { pretrain_steps: 150, lr: 3e-3, ..SeqTrainConfig::default() };
        let mut tr = SeqTrainer::new(tc, &m, &color, &set);
        let s = toy_sample(8, &cfg, &mut r);
        let curves = pretrain_encoders(&mut m, &mut tr, &[s]).unwrap();
        for c in &curves {
            assert!(c.last().unwrap() < &(0.5 * c[0]), "{} -> {}", c[0], c.last().unwrap());
        }
    }

    #[test]
    fn amplitude_and_rms() {
        let gt = vec![0.0, 3.0, 4.0, 1.0, 0.0, 0.0];
        assert_eq!(motion_amplitude(&gt), 5.0);
        assert_eq!(vertex_rms(&gt, &gt), 0.0);
        let p = vec![0.0, 3.0, 4.0, 1.0, 2.0, 0.0];
        assert!((vertex_rms(&p, &gt) - 2.0f64.sqrt()).abs() < 1e-15);
    }
}
