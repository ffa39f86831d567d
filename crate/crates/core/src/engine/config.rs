use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::density::{DensifyThresholds, PAPER_TOP_K};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::mesh::HeadSpec;
use crate::raster::Camera;
use crate::sequence::{SeqConfig, SeqTrainConfig};
use crate::tensor::ExpDecay;

/// Cameras spread evenly over a horizontal arc centred on `+z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRig {
    pub count: usize,
    pub radius: f64,
    /// Vertical field of view, radians.
    pub fov_y: f64,
    /// Total azimuth span, radians; `2π` gives a closed ring.
    pub arc: f64,
    pub elevation: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { count: 4, radius: 4.2, fov_y: 0.62, arc: 1.4, elevation: 0.25, width: 64, height: 64 }
    }
}

impl CameraRig {
    pub fn build(&self) -> Vec<Camera> {
        let n = self.count;
        (0..n)
            .map(|i| {
                let az = if n == 1 {
                    0.0
                } else if self.arc >= 2.0 * std::f64::consts::PI - 1e-9 {
                    self.arc * i as f64 / n as f64
                } else {
                    self.arc * (i as f64 / (n - 1) as f64 - 0.5)
                };
                let eye = [self.radius * az.sin(), self.elevation, self.radius * az.cos()];
                Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], self.fov_y, self.width, self.height)
            })
            .collect()
    }

    /// Index of the camera closest to the `+z` (frontal) direction.
    pub fn frontal(&self) -> usize {
        self.build()
            .iter()
            .enumerate()
            .map(|(i, c)| (i, -c.center()[2] / crate::math::norm(c.center()).max(1e-12)))
            .fold((0, f64::INFINITY), |best, (i, s)| if s < best.1 { (i, s) } else { best })
            .0
    }
}

/// Ground-truth avatar and recorded-data generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub head: HeadSpec,
    pub cameras: CameraRig,
    /// Frames of the avatar-fitting recording.
    pub fit_frames: usize,
    pub seq_frames: usize,
    pub train_sequences: usize,
    pub val_sequences: usize,
    pub test_sequences: usize,
    pub feature_dim: usize,
    /// Feature rate in frames per second (differs from the video rate on purpose).
    pub feature_rate: f64,
    pub latent_dim: usize,
    /// Truth splats bound to every face.
    pub splats_per_face: usize,
    /// Peak expression coefficient of the scripted curves.
    pub expr_peak: f64,
    /// Expression-driven forehead stripes in the truth colors.
    pub wrinkle_stripes: bool,
    /// Fine striped detail on the teeth, carried by a subdivided truth mesh.
    pub teeth_detail: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            head: HeadSpec::default(),
            cameras: CameraRig::default(),
            fit_frames: 8,
            seq_frames: 32,
            train_sequences: 8,
            val_sequences: 2,
            test_sequences: 2,
            feature_dim: 16,
            feature_rate: 50.0,
            latent_dim: 8,
            splats_per_face: 1,
            expr_peak: 1.0,
            wrinkle_stripes: false,
            teeth_detail: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitLr {
    /// Local position; decays exponentially over the run.
    pub position: ExpDecay,
    pub rotation: f64,
    pub scaling: f64,
    pub opacity: f64,
    pub latent: f64,
    pub color: ExpDecay,
}

impl Default for FitLr {
    fn default() -> Self {
        Self {
            position: ExpDecay { initial: 5e-3, last: 5e-5, steps: 100_000 },
            rotation: 1e-3,
            scaling: 5e-3,
            opacity: 5e-2,
            latent: 2.5e-3,
            color: ExpDecay { initial: 5e-3, last: 5e-5, steps: 100_000 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySchedule {
    pub every: u64,
    pub start: u64,
    pub stop: u64,
    pub thresholds: DensifyThresholds,
    /// Top-k budget after each densification.
    pub top_k: usize,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        Self { every: 5000, start: 5000, stop: 50_000, thresholds: DensifyThresholds::default(), top_k: PAPER_TOP_K }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub steps: u64,
    pub lr: FitLr,
    pub weights: LossWeights,
    pub eps_position: f64,
    pub eps_scaling: f64,
    pub densify: DensifySchedule,
    pub subdivide_mouth: bool,
    pub patch_size: usize,
    pub patch_count: usize,
    pub global_size: Option<[usize; 2]>,
    pub color_hidden: usize,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            lr: FitLr::default(),
            weights: LossWeights::default(),
            eps_position: 1.0,
            eps_scaling: 0.6,
            densify: DensifySchedule::default(),
            subdivide_mouth: true,
            patch_size: 16,
            patch_count: 16,
            global_size: None,
            color_hidden: crate::color::COLOR_HIDDEN,
            log_every: 100,
            eval_every: 1000,
            checkpoint_every: 10_000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqRunConfig {
    pub model: SeqConfig,
    pub train: SeqTrainConfig,
    pub log_every: u64,
}

/// Everything a run needs; serialized as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub holdout_camera: Option<usize>,
    pub scene: SceneConfig,
    pub fit: FitConfig,
    pub seq: SeqRunConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            holdout_camera: None,
            scene: SceneConfig::default(),
            fit: FitConfig::default(),
            seq: SeqRunConfig { log_every: 100, ..SeqRunConfig::default() },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn holdout(&self) -> usize {
        self.holdout_camera.unwrap_or_else(|| self.scene.cameras.frontal())
    }

    /// Cameras used for training (all but the held-out one, unless it is the only one).
    pub fn training_cameras(&self) -> Vec<usize> {
        let h = self.holdout();
        let all: Vec<usize> = (0..self.scene.cameras.count).filter(|&c| c != h).collect();
        if all.is_empty() {
            vec![h]
        } else {
            all
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let s = &self.scene;
        let c = &s.cameras;
        if c.count == 0 || c.width == 0 || c.height == 0 {
            return bad("camera count and image size must be positive".into());
        }
        if !(c.radius > 0.0 && c.fov_y > 0.0 && c.fov_y < std::f64::consts::PI && c.arc >= 0.0) {
            return bad("camera radius, fov and arc out of range".into());
        }
        if let Some(h) = self.holdout_camera {
            if h >= c.count {
                return bad(format!("holdout camera {h} of {}", c.count));
            }
        }
        if s.fit_frames == 0 || s.seq_frames < 2 || s.train_sequences == 0 {
            return bad("frame and sequence counts must be positive".into());
        }
        if s.feature_dim == 0 || !(s.feature_rate > 0.0) || s.latent_dim == 0 || s.splats_per_face == 0 {
            return bad("feature dim/rate, latent dim and splats per face must be positive".into());
        }
        if s.head.expr_dim == 0 {
            return bad("expression dimension must be positive".into());
        }
        let f = &self.fit;
        if f.steps == 0 || f.log_every == 0 || f.eval_every == 0 || f.checkpoint_every == 0 {
            return bad("fit schedules must be positive".into());
        }
        if f.densify.every == 0 || f.densify.top_k == 0 {
            return bad("densify interval and top-k must be positive".into());
        }
        if f.patch_size == 0 || f.patch_size > c.width.min(c.height) {
            return bad(format!("patch size {} does not fit {}×{}", f.patch_size, c.width, c.height));
        }
        let lrs = [f.lr.position.initial, f.lr.position.last, f.lr.rotation, f.lr.scaling, f.lr.opacity, f.lr.latent, f.lr.color.initial, f.lr.color.last];
        if lrs.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(f.eps_position >= 0.0 && f.eps_scaling >= 0.0) {
            return bad("hinge thresholds must be non-negative".into());
        }
        f.weights.validate()?;
        self.seq.model.validate()?;
        if self.seq.log_every == 0 {
            return bad("sequence log interval must be positive".into());
        }
        let t = &self.seq.train;
        if !(t.lr > 0.0 && t.color_lr >= 0.0 && t.latent_lr >= 0.0) {
            return bad("sequence learning rates out of range".into());
        }
        if t.wrinkle_camera >= c.count {
            return bad(format!("wrinkle camera {} of {}", t.wrinkle_camera, c.count));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.fit.steps, 100_000);
        assert_eq!(c.fit.densify.every, 5000);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("seed = 7\n[fit]\nsteps = 20\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.fit.steps, 20);
        assert_eq!(c.scene, SceneConfig::default());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::from_toml("[fit]\nsteps = 0\n").is_err());
        assert!(RunConfig::from_toml("holdout_camera = 9\n").is_err());
        assert!(RunConfig::from_toml("[scene]\nbogus = 1\n").is_err());
    }

    #[test]
    fn arc_rig_has_a_frontal_camera_choice() {
        let rig = CameraRig { count: 5, ..CameraRig::default() };
        assert_eq!(rig.frontal(), 2);
        let cams = rig.build();
        assert!(cams[2].center()[0].abs() < 1e-12);
        let c = RunConfig::default();
        assert_eq!(c.training_cameras().len(), 3);
    }
}
