//! Procedural ground truth: a known avatar, scripted expressions, synthetic
//! audio-like features, and the rendered multi-view recordings.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::avatar::Avatar;
use super::config::RunConfig;
use crate::color::{ColorModel, COLOR_HIDDEN};
use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use crate::mesh::{save_mesh, triangle_frames, BlendMesh, Region, TriangleFrame};
use crate::raster::{render_global, Camera, RenderOutput, RenderSettings};
use crate::seed::rng_for;
use crate::sequence::{FeatureSequence, SequenceData, FRAME_RATE};
use crate::splats::{RiggedGaussianSet, REST_LOG_SCALE};

const STREAM_TRUTH: u64 = 10;
const STREAM_SCRIPT: u64 = 11;
const STREAM_FEATURES: u64 = 12;

/// Expression mode that raises the brow and triggers forehead stripes.
pub const WRINKLE_MODE: usize = 3;
const STRIPE_PERIOD: f64 = 0.16;
const STRIPE_DEPTH: f64 = 0.6;
const TOOTH_PERIOD: f64 = 0.1;
const TINT_MIX: f64 = 0.85;
const DETAIL_SPLATS: usize = 8;

/// `ψ_e(τ) = a_e·sin(2π·f_e·τ + φ_e)`; mode 0 starts at zero phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExprScript {
    pub amp: Vec<f64>,
    pub freq: Vec<f64>,
    pub phase: Vec<f64>,
}

impl ExprScript {
    pub fn random<R: Rng>(dim: usize, peak: f64, rng: &mut R) -> Self {
        let amp = (0..dim).map(|e| if e == 0 { peak } else { peak * rng.random_range(0.4..1.0) }).collect();
        let freq = (0..dim).map(|_| rng.random_range(0.8..2.2)).collect();
        let phase = (0..dim).map(|e| if e == 0 { 0.0 } else { rng.random_range(0.0..2.0 * PI) }).collect();
        Self { amp, freq, phase }
    }

    pub fn at(&self, tau: f64) -> Vec<f64> {
        (0..self.amp.len()).map(|e| self.amp[e] * (2.0 * PI * self.freq[e] * tau + self.phase[e]).sin()).collect()
    }
}

/// `x_d(τ) = tanh(Σ_e W_de·ψ_e(τ) + b_d) + 0.05·sin(2π·f_d·τ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub carrier: Vec<f64>,
}

impl FeatureMap {
    pub fn random<R: Rng>(dim: usize, expr_dim: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, 1.5 / (expr_dim as f64).sqrt()).expect("positive std");
        Self {
            dim,
            weights: (0..dim * expr_dim).map(|_| n.sample(rng)).collect(),
            bias: (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect(),
            carrier: (0..dim).map(|_| rng.random_range(3.0..12.0)).collect(),
        }
    }

    pub fn at(&self, psi: &[f64], tau: f64) -> Vec<f64> {
        let e = psi.len();
        (0..self.dim)
            .map(|d| {
                let z: f64 = (0..e).map(|k| self.weights[d * e + k] * psi[k]).sum::<f64>() + self.bias[d];
                z.tanh() + 0.05 * (2.0 * PI * self.carrier[d] * tau).sin()
            })
            .collect()
    }

    /// Feature sequence covering `frames` video frames: `N_a = round(T·rate/30)`
    /// samples with both ends aligned to the first and last frame.
    pub fn sequence(&self, script: &ExprScript, frames: usize, rate: f64) -> Result<FeatureSequence> {
        let na = ((frames as f64 * rate / FRAME_RATE).round() as usize).max(2);
        let span = (frames - 1) as f64 / FRAME_RATE;
        let mut data = Vec::with_capacity(na * self.dim);
        for j in 0..na {
            let tau = span * j as f64 / (na - 1) as f64;
            data.extend(self.at(&script.at(tau), tau));
        }
        FeatureSequence::new(data, na, self.dim, rate)
    }
}

/// Which part of the truth avatar a splat belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetailBand {
    Base,
    Forehead,
    Teeth,
}

/// Per-splat color edits layered on the truth avatar's color network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruthDetail {
    pub band: Vec<DetailBand>,
    /// Stripe weight in `{0, 1}`; darkens with the brow-raise coefficient.
    pub stripe: Vec<f64>,
    /// Fixed tint and its mix factor.
    pub tint: Vec<Vec3>,
    pub tint_mix: Vec<f64>,
    pub stripe_mode: usize,
    pub stripe_depth: f64,
    pub expr_peak: f64,
}

impl TruthDetail {
    fn push(&mut self, band: DetailBand, stripe: f64, tint: Vec3, mix: f64) {
        self.band.push(band);
        self.stripe.push(stripe);
        self.tint.push(tint);
        self.tint_mix.push(mix);
    }

    pub fn apply(&self, colors: &mut [Vec3], psi: &[f64]) {
        let raise = psi.get(self.stripe_mode).map_or(0.0, |&p| (p / self.expr_peak).clamp(0.0, 1.0));
        for (i, c) in colors.iter_mut().enumerate() {
            let dark = 1.0 - self.stripe_depth * raise * self.stripe[i];
            let m = self.tint_mix[i];
            for k in 0..3 {
                c[k] = (1.0 - m) * c[k] * dark + m * self.tint[i][k];
            }
        }
    }
}

/// The generator's avatar plus its detail layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthAvatar {
    pub avatar: Avatar,
    pub detail: TruthDetail,
}

impl TruthAvatar {
    pub fn render(&self, psi: &[f64], cam: &Camera) -> Result<RenderOutput> {
        let posed = self.avatar.pose(psi, None)?;
        let mut colors = self.avatar.colors(&posed, psi, cam)?;
        self.detail.apply(&mut colors, psi);
        render_global(&posed.global, &colors, cam, &RenderSettings::default())
    }

    /// Pixels where the splats selected by `sel` carry more than `min_weight` of the
    /// composite (rendered with unit color over black).
    pub fn coverage(&self, psi: &[f64], cam: &Camera, sel: &[bool], min_weight: f64) -> Result<Vec<bool>> {
        let posed = self.avatar.pose(psi, None)?;
        let colors: Vec<Vec3> = sel.iter().map(|&s| if s { [1.0; 3] } else { [0.0; 3] }).collect();
        let out = render_global(&posed.global, &colors, cam, &RenderSettings { background: [0.0; 3], ..RenderSettings::default() })?;
        Ok(out.rgb[..cam.width * cam.height].iter().map(|&v| v > min_weight).collect())
    }

    pub fn stripe_splats(&self) -> Vec<bool> {
        self.detail.stripe.iter().map(|&s| s > 0.0).collect()
    }

    pub fn tinted_splats(&self) -> Vec<bool> {
        self.detail.tint_mix.iter().map(|&m| m > 0.0).collect()
    }

    pub fn band_splats(&self, band: DetailBand) -> Vec<bool> {
        self.detail.band.iter().map(|&b| b == band).collect()
    }
}

fn head_dir(mesh: &BlendMesh, radii: Vec3, f: usize) -> Vec3 {
    let [a, b, c] = mesh.faces[f];
    let p = math::scale(math::add(math::add(mesh.template[a], mesh.template[b]), mesh.template[c]), 1.0 / 3.0);
    math::normalize([p[0] / radii[0], p[1] / radii[1], p[2] / radii[2]])
}

/// Forehead faces of the procedural head.
pub fn forehead_faces(mesh: &BlendMesh, radii: Vec3) -> Vec<usize> {
    (0..mesh.face_count())
        .filter(|&f| {
            let d = head_dir(mesh, radii, f);
            d[1] > 0.3 && d[1] < 0.85 && d[2] > 0.35
        })
        .collect()
}

fn local_point(fr: &TriangleFrame, p: Vec3) -> Vec3 {
    math::scale(math::mat_t_vec(&fr.rotation, math::sub(p, fr.translation)), 1.0 / fr.scale)
}

fn random_in_face<R: Rng>(mesh: &BlendMesh, f: usize, rng: &mut R) -> Vec3 {
    let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    let [a, b, c] = mesh.faces[f];
    let (p0, p1, p2) = (mesh.template[a], mesh.template[b], mesh.template[c]);
    math::add(p0, math::add(math::scale(math::sub(p1, p0), u), math::scale(math::sub(p2, p0), v)))
}

fn random_quat<R: Rng>(rng: &mut R, spread: f64) -> [f64; 4] {
    math::quat_normalize([1.0, rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)])
}

/// Builds the ground-truth avatar for `cfg.scene`.
pub fn truth_avatar(cfg: &RunConfig) -> Result<TruthAvatar> {
    let sc = &cfg.scene;
    let mut rng = rng_for(cfg.seed, &[STREAM_TRUTH]);
    let base = sc.head.build();
    let mesh = if sc.teeth_detail { base.subdivide_region(Region::Teeth)? } else { base };
    let frames = triangle_frames(&mesh.template, &mesh.faces)?;
    let latent = Normal::new(0.0, 1.0).expect("positive std");
    let mut set = RiggedGaussianSet::empty(sc.latent_dim);
    let mut detail = TruthDetail {
        stripe_mode: WRINKLE_MODE.min(mesh.expr_dim - 1),
        stripe_depth: STRIPE_DEPTH,
        expr_peak: sc.expr_peak.max(1e-9),
        ..TruthDetail::default()
    };
    let push = |set: &mut RiggedGaussianSet, face: usize, mu: Vec3, log_xy: f64, log_z: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        set.mu_local.push(mu);
        set.q_local.push(random_quat(rng, 0.3));
        set.log_s.push([log_xy + rng.random_range(-0.15..0.15), log_xy + rng.random_range(-0.15..0.15), log_z]);
        set.opacity_logit.push(rng.random_range(2.0..4.0));
        for _ in 0..sc.latent_dim {
            set.latent.push(latent.sample(rng));
        }
        set.parent_face.push(face);
    };
    for (f, fr) in frames.iter().enumerate() {
        for _ in 0..sc.splats_per_face {
            let p = if sc.splats_per_face == 1 { fr.translation } else { random_in_face(&mesh, f, &mut rng) };
            let mut mu = local_point(fr, p);
            mu[0] += rng.random_range(-0.1..0.1);
            mu[1] += rng.random_range(-0.1..0.1);
            mu[2] = rng.random_range(-0.05..0.05);
            push(&mut set, f, mu, REST_LOG_SCALE + 0.2, REST_LOG_SCALE - 0.8, &mut rng);
            detail.push(DetailBand::Base, 0.0, [0.0; 3], 0.0);
        }
    }
    if sc.wrinkle_stripes {
        for f in forehead_faces(&mesh, sc.head.radii) {
            for _ in 0..DETAIL_SPLATS {
                let p = random_in_face(&mesh, f, &mut rng);
                let mut mu = local_point(&frames[f], p);
                mu[2] = 0.02;
                push(&mut set, f, mu, (0.22f64).ln(), (0.1f64).ln(), &mut rng);
                let on = if (2.0 * PI * p[1] / STRIPE_PERIOD).sin() > 0.0 { 1.0 } else { 0.0 };
                detail.push(DetailBand::Forehead, on, [0.0; 3], 0.0);
            }
        }
    }
    if sc.teeth_detail {
        for f in mesh.faces_in(Region::Teeth) {
            for _ in 0..DETAIL_SPLATS {
                let p = random_in_face(&mesh, f, &mut rng);
                let mut mu = local_point(&frames[f], p);
                mu[2] = 0.02;
                push(&mut set, f, mu, (0.3f64).ln(), (0.1f64).ln(), &mut rng);
                let tint = if (2.0 * PI * p[0] / TOOTH_PERIOD).sin() > 0.0 { [0.96, 0.95, 0.9] } else { [0.25, 0.1, 0.1] };
                detail.push(DetailBand::Teeth, 0.0, tint, TINT_MIX);
            }
        }
    }
    set.validate(mesh.face_count())?;
    let color = ColorModel::new(mesh.expr_dim, sc.latent_dim, COLOR_HIDDEN, &mut rng);
    Ok(TruthAvatar { avatar: Avatar { mesh, set, color }, detail })
}

/// Scripts and feature maps of every recording, in the order they are written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScripts {
    pub fit: ExprScript,
    pub features: FeatureMap,
    pub sequences: Vec<(String, ExprScript)>,
}

pub fn scene_scripts(cfg: &RunConfig) -> SceneScripts {
    let sc = &cfg.scene;
    let e = sc.head.expr_dim;
    let mut r = rng_for(cfg.seed, &[STREAM_SCRIPT]);
    let fit = ExprScript::random(e, sc.expr_peak, &mut r);
    let mut sequences = Vec::new();
    for (split, n) in [("train", sc.train_sequences), ("val", sc.val_sequences), ("test", sc.test_sequences)] {
        for i in 0..n {
            sequences.push((format!("{split}/seq_{i:03}"), ExprScript::random(e, sc.expr_peak, &mut r)));
        }
    }
    let features = FeatureMap::random(sc.feature_dim, e, &mut rng_for(cfg.seed, &[STREAM_FEATURES]));
    SceneScripts { fit, features, sequences }
}

/// Renders one recording. Frame `t` sits at time `t·dt`.
pub fn record(
    truth: &TruthAvatar,
    base_mesh: &BlendMesh,
    script: &ExprScript,
    features: &FeatureMap,
    cameras: &[Camera],
    frames: usize,
    dt: f64,
    feature_rate: f64,
) -> Result<SequenceData> {
    let mut vertices = Vec::with_capacity(frames * 3 * base_mesh.vertex_count());
    let mut expr = Vec::with_capacity(frames * base_mesh.expr_dim);
    let mut images: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::with_capacity(frames); cameras.len()];
    for t in 0..frames {
        let psi = script.at(t as f64 * dt);
        vertices.extend(base_mesh.evaluate(&psi, None)?.iter().flatten());
        for (c, cam) in cameras.iter().enumerate() {
            let out = truth.render(&psi, cam)?;
            images[c].push((out.rgb, out.alpha));
        }
        expr.extend(psi);
    }
    let feats = if frames >= 2 {
        features.sequence(script, frames, feature_rate)?
    } else {
        FeatureSequence::new(features.at(&script.at(0.0), 0.0), 1, features.dim, feature_rate)?
    };
    Ok(SequenceData {
        features: feats,
        frames,
        vertex_count: base_mesh.vertex_count(),
        vertices,
        expr_dim: base_mesh.expr_dim,
        expr,
        cameras: cameras.to_vec(),
        images,
    })
}

/// Time between frames of the avatar-fitting recording: one second spread over all frames.
pub fn fit_dt(cfg: &RunConfig) -> f64 {
    1.0 / cfg.scene.fit_frames as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub truth_splats: usize,
    pub images: usize,
    pub sequences: Vec<String>,
}

/// Writes the full synthetic dataset under `out`.
///
/// Layout: `config.toml`, `mesh.obj` (+ sidecar), `truth/` (archived truth avatar and
/// scripts), `avatar/` (fitting recording), `{train,val,test}/seq_NNN/`.
pub fn synth_scene(cfg: &RunConfig, out: &Path) -> Result<SynthReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let base = cfg.scene.head.build();
    let truth = truth_avatar(cfg)?;
    let scripts = scene_scripts(cfg);
    let cams = cfg.scene.cameras.build();
    let cfg_path = out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    save_mesh(&base, &out.join("mesh.obj"))?;
    super::checkpoint::save_truth(&out.join("truth"), cfg, &truth, &scripts)?;

    let mut report = SynthReport { truth_splats: truth.avatar.set.len(), ..SynthReport::default() };
    let sc = &cfg.scene;
    let fit = record(&truth, &base, &scripts.fit, &scripts.features, &cams, sc.fit_frames, fit_dt(cfg), sc.feature_rate)?;
    fit.save(&out.join("avatar"))?;
    report.images += sc.fit_frames * cams.len();
    for (name, script) in &scripts.sequences {
        let d = record(&truth, &base, script, &scripts.features, &cams, sc.seq_frames, 1.0 / FRAME_RATE, sc.feature_rate)?;
        d.save(&out.join(name))?;
        report.images += sc.seq_frames * cams.len();
        report.sequences.push(name.clone());
    }
    Ok(report)
}

/// Lists `split/seq_NNN` directories present under `root`, sorted.
pub fn list_sequences(root: &Path, split: &str) -> Result<Vec<std::path::PathBuf>> {
    let dir = root.join(split);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}
