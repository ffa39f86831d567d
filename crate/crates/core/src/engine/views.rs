use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::avatar::Avatar;
use super::checkpoint::SeqState;
use super::config::CameraRig;
use crate::error::{Error, Result};
use crate::losses::{psnr, ssim};
use crate::math::Vec3;
use crate::raster::{render_global, save_png, Camera, RenderOutput, RenderSettings};
use crate::sequence::{frequency_interpolate, SequenceData, FRAME_RATE};

/// Where per-frame expressions come from when rendering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExprSource {
    Neutral,
    Recorded,
    Predicted,
}

/// Mesh deformation and color conditioning of one rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePose {
    pub psi: Vec<f64>,
    pub offsets: Option<Vec<Vec3>>,
    pub color_psi: Vec<f64>,
}

pub fn neutral_pose(avatar: &Avatar) -> FramePose {
    let psi = vec![0.0; avatar.mesh.expr_dim];
    FramePose { psi: psi.clone(), offsets: None, color_psi: psi }
}

/// Recorded expression coefficients, frame by frame.
pub fn recorded_poses(avatar: &Avatar, data: &SequenceData) -> Result<Vec<FramePose>> {
    if data.expr_dim != avatar.mesh.expr_dim {
        return Err(Error::shape("recorded_poses", format!("{} expression dims for a {}-dim mesh", data.expr_dim, avatar.mesh.expr_dim)));
    }
    Ok((0..data.frames)
        .map(|f| {
            let psi = data.expr_row(f).to_vec();
            FramePose { psi: psi.clone(), offsets: None, color_psi: psi }
        })
        .collect())
}

/// Vertex offsets and expressions predicted from the recording's audio features.
pub fn predicted_poses(state: &SeqState, data: &SequenceData) -> Result<Vec<FramePose>> {
    let feats = frequency_interpolate(&data.features, FRAME_RATE)?;
    let t = feats.frames.min(data.frames);
    let pred = state.model.predict(&feats.data[..t * feats.dim], t)?;
    let v = state.avatar.mesh.vertex_count();
    let e = state.model.config.expr_dim;
    Ok((0..t)
        .map(|f| FramePose {
            psi: vec![0.0; state.avatar.mesh.expr_dim],
            offsets: Some(pred.offsets[f * 3 * v..(f + 1) * 3 * v].chunks(3).map(|c| [c[0], c[1], c[2]]).collect()),
            color_psi: pred.expr[f * e..(f + 1) * e].to_vec(),
        })
        .collect())
}

pub fn render_pose(avatar: &Avatar, pose: &FramePose, cam: &Camera) -> Result<RenderOutput> {
    let posed = avatar.pose(&pose.psi, pose.offsets.as_deref())?;
    let colors = avatar.colors(&posed, &pose.color_psi, cam)?;
    render_global(&posed.global, &colors, cam, &RenderSettings::default())
}

/// `views` cameras on a closed ring with the rig's radius, elevation and intrinsics.
pub fn orbit(rig: &CameraRig, views: usize) -> Vec<Camera> {
    CameraRig { count: views, arc: 2.0 * std::f64::consts::PI, ..rig.clone() }.build()
}

/// Default file name pattern of [`render_views`].
pub const NAME_PATTERN: &str = "view{view}_frame{frame}.png";

/// Expands `{view}` and `{frame}` (zero-padded to three digits) in `pattern`.
pub fn frame_name(pattern: &str, view: usize, frame: usize) -> String {
    pattern.replace("{view}", &format!("{view:03}")).replace("{frame}", &format!("{frame:03}"))
}

/// Renders every `(frame index, pose)` from every camera into `out`, returning the
/// written paths in view-major order.
pub fn render_views(avatar: &Avatar, cams: &[Camera], poses: &[(usize, FramePose)], pattern: &str, out: &Path) -> Result<Vec<PathBuf>> {
    if !pattern.contains("{view}") && cams.len() > 1 || !pattern.contains("{frame}") && poses.len() > 1 {
        return Err(Error::Invalid(format!("name pattern `{pattern}` would overwrite its own outputs")));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::with_capacity(cams.len() * poses.len());
    for (v, cam) in cams.iter().enumerate() {
        for (f, pose) in poses {
            let img = render_pose(avatar, pose, cam)?;
            let p = out.join(frame_name(pattern, v, *f));
            save_png(&p, &img.rgb, cam.width, cam.height)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetric {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Image quality of an avatar against one camera of a recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub camera: usize,
    pub source: ExprSource,
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub per_frame: Vec<FrameMetric>,
}

pub fn image_metrics(avatar: &Avatar, data: &SequenceData, poses: &[FramePose], camera: usize, source: ExprSource) -> Result<MetricsReport> {
    let cam = data.cameras.get(camera).ok_or_else(|| Error::Invalid(format!("no camera {camera} in a {}-camera recording", data.cameras.len())))?;
    if poses.len() != data.frames {
        return Err(Error::shape("image_metrics", format!("{} poses for {} frames", poses.len(), data.frames)));
    }
    let mut per_frame = Vec::with_capacity(poses.len());
    for (f, pose) in poses.iter().enumerate() {
        let out = render_pose(avatar, pose, cam)?;
        let gt = &data.images[camera][f].0;
        per_frame.push(FrameMetric { frame: f, psnr: psnr(&out.rgb, gt), ssim: ssim(&out.rgb, gt, cam.height, cam.width)? });
    }
    let n = per_frame.len().max(1) as f64;
    Ok(MetricsReport {
        camera,
        source,
        frames: per_frame.len(),
        psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_expand_and_pad() {
        assert_eq!(frame_name(NAME_PATTERN, 3, 12), "view003_frame012.png");
        assert_eq!(frame_name("orbit_{view}.png", 7, 0), "orbit_007.png");
    }

    #[test]
    fn orbit_is_a_closed_ring() {
        let cams = orbit(&CameraRig::default(), 8);
        assert_eq!(cams.len(), 8);
        let r = CameraRig::default().radius;
        for c in &cams {
            let p = c.center();
            assert!(((p[0] * p[0] + p[2] * p[2]).sqrt() - r).abs() < 1e-12);
        }
        let mean_x: f64 = cams.iter().map(|c| c.center()[0]).sum::<f64>() / 8.0;
        assert!(mean_x.abs() < 1e-12);
    }
}
