use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::avatar::Avatar;
use super::config::RunConfig;
use crate::color::{ColorModel, ColorTrain};
use crate::density::{densify, prune_topk, DensifyReport, GradStats, PruneReport};
use crate::error::{Error, Result};
use crate::losses::{l_position, l_scaling, psnr, ssim, FeatureBackend, ImageObjective, ImageTerms, ToyConvBackend, WrinkleBackend};
use crate::math::{self, Vec3};
use crate::mesh::{triangle_frames, BlendMesh, Region};
use crate::raster::{render_backward, view_dir_backward, RenderSettings};
use crate::seed::{derive_seed, rng_for};
use crate::sequence::SequenceData;
use crate::splats::{bind_gaussians, to_global_backward, RiggedGaussianSet, SplatAdam};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor};

pub(crate) const STREAM_INIT: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_PATCH: u64 = 3;
const STREAM_DENSIFY: u64 = 4;
pub(crate) const STREAM_BACKEND: u64 = 5;

/// Feature extractors shared by the fitting and sequence stages.
pub struct Backends {
    pub perceptual: ToyConvBackend,
    pub wrinkle: WrinkleBackend,
}

impl Backends {
    pub fn new(seed: u64) -> Self {
        Self { perceptual: ToyConvBackend::new(derive_seed(seed, &[STREAM_BACKEND])), wrinkle: WrinkleBackend::default() }
    }
}

/// Everything that evolves during avatar fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub config: RunConfig,
    pub avatar: Avatar,
    pub adam: SplatAdam,
    pub color_adam: Adam,
    pub stats: GradStats,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub camera: usize,
    pub frame: usize,
    pub loss: f64,
    pub terms: ImageTerms,
    pub position: f64,
    pub scaling: f64,
    pub psnr: f64,
    pub splats: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DensifyLog {
    pub step: u64,
    pub densify: DensifyReport,
    pub prune: PruneReport,
    pub splats: usize,
    /// Every face still carries at least one splat.
    pub floor_ok: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: u64,
    pub camera: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// The mesh the fit runs on: the recorded mesh, optionally with a subdivided mouth.
pub fn fitting_mesh(base: &BlendMesh, subdivide_mouth: bool) -> Result<BlendMesh> {
    if subdivide_mouth {
        base.subdivide_region(Region::Teeth)
    } else {
        Ok(base.clone())
    }
}

impl FitState {
    /// One rest-pose splat per face of the fitting mesh and a fresh color network.
    pub fn new(config: RunConfig, base_mesh: &BlendMesh) -> Result<Self> {
        config.validate()?;
        let mesh = fitting_mesh(base_mesh, config.fit.subdivide_mouth)?;
        let mut rng = rng_for(config.seed, &[STREAM_INIT]);
        let frames = triangle_frames(&mesh.template, &mesh.faces)?;
        let set = bind_gaussians(&frames, config.scene.latent_dim, &mut rng);
        let color = ColorModel::new(mesh.expr_dim, config.scene.latent_dim, config.fit.color_hidden, &mut rng);
        let color_adam = Adam::new(&color.params, AdamConfig::default());
        let adam = SplatAdam::new(&set);
        let stats = GradStats::new(set.len());
        Ok(Self { config, avatar: Avatar { mesh, set, color }, adam, color_adam, stats, step: 0 })
    }
}

fn check_data(data: &SequenceData, mesh: &BlendMesh, cfg: &RunConfig) -> Result<()> {
    if data.expr_dim != mesh.expr_dim {
        return Err(Error::shape("fit_avatar", format!("data has {} expression dims, mesh {}", data.expr_dim, mesh.expr_dim)));
    }
    if data.cameras.len() <= cfg.training_cameras().into_iter().max().unwrap_or(0) {
        return Err(Error::Invalid(format!("dataset has {} cameras", data.cameras.len())));
    }
    Ok(())
}

fn hinge_grad(values: &[Vec3], eps: f64, exp: bool) -> Result<(f64, Vec<Vec3>)> {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::new(vec![values.len(), 3], values.iter().flatten().copied().collect())?);
    let l = if exp { l_scaling(&mut tape, x, eps)? } else { l_position(&mut tape, x, eps)? };
    let v = tape.value(l).item();
    tape.backward(l)?;
    let g = tape.grad(x).map(|g| g.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap_or_else(|| vec![[0.0; 3]; values.len()]);
    Ok((v, g))
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn floor_holds(set: &RiggedGaussianSet, faces: usize) -> bool {
    let mut covered = vec![false; faces];
    for &f in &set.parent_face {
        covered[f] = true;
    }
    covered.iter().all(|&c| c)
}

/// One optimization step on a sampled (camera, frame) pair.
pub fn fit_step(state: &mut FitState, data: &SequenceData, backends: &Backends) -> Result<StepLog> {
    let cfg = state.config.clone();
    let fc = &cfg.fit;
    check_data(data, &state.avatar.mesh, &cfg)?;
    let cams = cfg.training_cameras();
    let mut r = rng_for(cfg.seed, &[STREAM_SAMPLE, state.step]);
    let camera = cams[r.random_range(0..cams.len())];
    let frame = r.random_range(0..data.frames);
    let cam = &data.cameras[camera];
    let psi = data.expr_row(frame).to_vec();
    let (h, w) = (cam.height, cam.width);

    let av = &state.avatar;
    let posed = av.pose(&psi, None)?;
    let mut tape = Tape::new();
    let train = ColorTrain { weights: true, psi: false, latent: true, dirs: true };
    let cv = av.record_colors(&mut tape, &posed, &psi, cam, train)?;
    let colors: Vec<Vec3> = tape.value(cv.colors).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let out = crate::raster::render_global(&posed.global, &colors, cam, &RenderSettings::default())?;

    let (gt_rgb, gt_alpha) = &data.images[camera][frame];
    let wt = &fc.weights;
    let obj = ImageObjective {
        weights: wt,
        backend: &backends.perceptual as &dyn FeatureBackend,
        global_size: fc.global_size.map(|[a, b]| (a, b)),
        global: wt.lambda_g > 0.0,
        patch: (wt.lambda_p > 0.0).then(|| (fc.patch_size, fc.patch_count, derive_seed(cfg.seed, &[STREAM_PATCH, state.step]))),
        wrinkle: (wt.lambda_w > 0.0).then_some(&backends.wrinkle as &dyn FeatureBackend),
    };
    let (img_loss, grad, terms) = obj.evaluate(&out.rgb, gt_rgb, gt_alpha, h, w)?;
    let rg = render_backward(&out, &grad, None)?;
    tape.backward_with(cv.colors, &flat3(&rg.colors))?;

    let mut global = rg.global;
    if let Some(gd) = tape.grad(cv.dirs) {
        let gd: Vec<Vec3> = gd.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        for (m, d) in global.mean.iter_mut().zip(view_dir_backward(&posed.global.mean, cam, &gd)) {
            *m = math::add(*m, d);
        }
    }
    let (mut local, _) = to_global_backward(&av.set, &posed.frames, &global);
    let (l_pos, g_pos) = hinge_grad(&av.set.mu_local, fc.eps_position, false)?;
    let (l_s, g_s) = hinge_grad(&av.set.log_s, fc.eps_scaling, true)?;
    for i in 0..av.set.len() {
        for c in 0..3 {
            local.mu_local[i][c] += wt.lambda_pos * g_pos[i][c];
            local.log_s[i][c] += wt.lambda_s * g_s[i][c];
        }
    }
    let loss = img_loss + wt.lambda_pos * l_pos + wt.lambda_s * l_s;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("fit loss at step {}", state.step)));
    }
    let latent_grad = tape.grad(cv.latent).map(<[f64]>::to_vec);
    let color_grads = cv.bound.grads(&tape);

    state.stats.accumulate(&global.mean, &local.mu_local);
    let step = state.step;
    let lr = &fc.lr;
    let acfg = AdamConfig::default();
    let set = &mut state.avatar.set;
    let mut mu = flat3(&set.mu_local);
    state.adam.mu_local.update(&mut mu, &flat3(&local.mu_local), lr.position.at(step), &acfg);
    set.mu_local = mu.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let mut q: Vec<f64> = set.q_local.iter().flatten().copied().collect();
    let gq: Vec<f64> = local.q_local.iter().flatten().copied().collect();
    state.adam.q_local.update(&mut q, &gq, lr.rotation, &acfg);
    set.q_local = q.chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let mut ls = flat3(&set.log_s);
    state.adam.log_s.update(&mut ls, &flat3(&local.log_s), lr.scaling, &acfg);
    set.log_s = ls.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    state.adam.opacity_logit.update(&mut set.opacity_logit, &local.opacity_logit, lr.opacity, &acfg);
    if let Some(g) = latent_grad {
        state.adam.latent.update(&mut set.latent, &g, lr.latent, &acfg);
    }
    state.color_adam.step(&mut state.avatar.color.params, &color_grads, lr.color.at(step));
    state.step += 1;

    Ok(StepLog {
        step,
        camera,
        frame,
        loss,
        terms,
        position: l_pos,
        scaling: l_s,
        psnr: psnr(&out.rgb, gt_rgb),
        splats: state.avatar.set.len(),
    })
}

/// Densify then prune if the schedule fires after the last completed step.
pub fn maybe_densify(state: &mut FitState) -> Result<Option<DensifyLog>> {
    let d = &state.config.fit.densify;
    let s = state.step;
    if s == 0 || !s.is_multiple_of(d.every) || s < d.start || s > d.stop {
        return Ok(None);
    }
    let av = &mut state.avatar;
    let frames = triangle_frames(&av.mesh.template, &av.mesh.faces)?;
    let mut rng = rng_for(state.config.seed, &[STREAM_DENSIFY, s]);
    let latent_dim = av.set.latent_dim;
    let (set, mapping, densify_report) = densify(&av.set, &frames, &state.stats, &d.thresholds, &mut rng)?;
    state.adam.remap(&mapping, latent_dim);
    av.set = set;
    let mut prune_report = PruneReport::default();
    if av.set.len() > d.top_k {
        let (set, mapping, rep) = prune_topk(&av.set, &frames, d.top_k, &mut rng);
        state.adam.remap(&mapping, latent_dim);
        av.set = set;
        prune_report = rep;
    }
    state.stats = GradStats::new(av.set.len());
    let floor_ok = floor_holds(&av.set, av.mesh.face_count());
    Ok(Some(DensifyLog { step: s, densify: densify_report, prune: prune_report, splats: av.set.len(), floor_ok }))
}

/// Mean PSNR / SSIM over all frames seen from `camera`.
pub fn evaluate(avatar: &Avatar, data: &SequenceData, camera: usize, step: u64) -> Result<EvalReport> {
    let cam = data.cameras.get(camera).ok_or_else(|| Error::Invalid(format!("no camera {camera}")))?;
    let (mut p, mut s) = (0.0, 0.0);
    for f in 0..data.frames {
        let out = avatar.render(data.expr_row(f), cam, &RenderSettings::default())?;
        let gt = &data.images[camera][f].0;
        p += psnr(&out.rgb, gt);
        s += ssim(&out.rgb, gt, cam.height, cam.width)?;
    }
    let n = data.frames as f64;
    Ok(EvalReport { step, camera, psnr: p / n, ssim: s / n })
}

/// Masked mean absolute error over all frames from `camera`; `mask[f]` selects pixels.
pub fn band_error(avatar: &Avatar, data: &SequenceData, camera: usize, masks: &[Vec<bool>]) -> Result<f64> {
    let cam = &data.cameras[camera];
    let hw = cam.width * cam.height;
    let (mut sum, mut n) = (0.0, 0usize);
    for f in 0..data.frames {
        let out = avatar.render(data.expr_row(f), cam, &RenderSettings::default())?;
        let gt = &data.images[camera][f].0;
        for c in 0..3 {
            for p in 0..hw {
                if masks[f][p] {
                    sum += (out.rgb[c * hw + p] - gt[c * hw + p]).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::Invalid("empty band mask".into()));
    }
    Ok(sum / n as f64)
}

/// Logs and evaluations of a fitting run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitLog {
    pub steps: Vec<StepLog>,
    pub densify: Vec<DensifyLog>,
    pub evals: Vec<EvalReport>,
}

/// Hooks called by [`fit_avatar`]; the CLI uses them for checkpoints and log files.
pub trait FitObserver {
    fn on_step(&mut self, _state: &FitState, _log: &StepLog) -> Result<()> {
        Ok(())
    }
    fn on_eval(&mut self, _state: &FitState, _eval: &EvalReport) -> Result<()> {
        Ok(())
    }
    fn on_densify(&mut self, _state: &FitState, _log: &DensifyLog) -> Result<()> {
        Ok(())
    }
    fn on_failure(&mut self, _state: &FitState, _err: &Error) {}
}

impl FitObserver for () {}

/// Runs `state` forward until `until` steps (capped by the configured total).
pub fn fit_avatar(state: &mut FitState, data: &SequenceData, until: u64, obs: &mut dyn FitObserver) -> Result<FitLog> {
    let backends = Backends::new(state.config.seed);
    let holdout = state.config.holdout();
    let until = until.min(state.config.fit.steps);
    let mut log = FitLog::default();
    while state.step < until {
        let s = match fit_step(state, data, &backends) {
            Ok(s) => s,
            Err(e) => {
                obs.on_failure(state, &e);
                return Err(e);
            }
        };
        if s.step % state.config.fit.log_every == 0 || state.step == until {
            obs.on_step(state, &s)?;
            log.steps.push(s);
        }
        if state.step.is_multiple_of(state.config.fit.eval_every) || state.step == until {
            let e = evaluate(&state.avatar, data, holdout, state.step)?;
            obs.on_eval(state, &e)?;
            log.evals.push(e);
        }
        if let Some(d) = maybe_densify(state)? {
            if !d.floor_ok {
                return Err(Error::Invalid(format!("prune at step {} left a face without splats", d.step)));
            }
            obs.on_densify(state, &d)?;
            log.densify.push(d);
        }
    }
    Ok(log)
}

/// Writes `log` as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r).map_err(|e| Error::format("log", e.to_string()))?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
