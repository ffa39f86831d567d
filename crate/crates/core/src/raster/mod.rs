//! Differentiable perspective splat rasterizer.
//!
//! Cameras follow the OpenCV convention (`+z` forward, `+y` down) and pixel
//! `(x, y)` is sampled at its centre `(x + 0.5, y + 0.5)`. Images are stored
//! channel-planar: `rgb[c·H·W + y·W + x]`.

mod backward;
mod image_io;
pub(crate) mod render;

pub use backward::{render_backward, view_dir_backward, RasterGrad};
pub use image_io::{load_png, save_png, save_png_rgba, save_ppm, to_rgb8};
pub use render::{render, render_global, render_naive, RenderOutput, RenderSettings};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::splats::GlobalSplats;

/// Screen-space blur added to every projected covariance, px².
pub const COV2D_FLOOR: f64 = 0.3;
pub const DEFAULT_NEAR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World→camera rotation `W`.
    pub rotation: Mat3,
    /// World→camera translation `t`: `x_cam = W·x + t`.
    pub translation: Vec3,
}

impl Camera {
    /// Pinhole camera at `eye` looking at `target`; `fov_y` in radians.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fov_y: f64, width: usize, height: usize) -> Self {
        let z = math::normalize(math::sub(target, eye));
        let x = math::normalize(math::cross(z, up));
        let y = math::cross(z, x);
        let rotation = [x, y, z];
        let translation = math::scale(math::mat_vec(&rotation, eye), -1.0);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            rotation,
            translation,
        }
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        math::add(math::mat_vec(&self.rotation, p), self.translation)
    }

    /// Camera centre in world coordinates, `−Wᵀt`.
    pub fn center(&self) -> Vec3 {
        math::scale(math::mat_t_vec(&self.rotation, self.translation), -1.0)
    }

    /// Same camera after moving the world by `x ↦ Q·x + d`.
    pub fn moved(&self, q: &Mat3, d: Vec3) -> Self {
        let rotation = math::mat_mul(&self.rotation, &math::transpose(q));
        let translation = math::sub(self.translation, math::mat_vec(&rotation, d));
        Self {
            rotation,
            translation,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Invalid(format!(
                "camera needs positive focal lengths and size, got fx={} fy={} {}×{}",
                self.fx, self.fy, self.width, self.height
            )));
        }
        let rtr = math::mat_mul(&math::transpose(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - want).abs() > 1e-10 {
                    return Err(Error::Invalid("camera rotation is not orthonormal".into()));
                }
            }
        }
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("camera".into()));
        }
        Ok(())
    }

    /// `count` cameras on a horizontal ring around `target`, starting on `+z`.
    pub fn ring(count: usize, radius: f64, target: Vec3, elevation: f64, fov_y: f64, width: usize, height: usize) -> Vec<Self> {
        (0..count)
            .map(|i| {
                let az = 2.0 * std::f64::consts::PI * i as f64 / count as f64;
                let eye = [
                    target[0] + radius * az.sin(),
                    target[1] + elevation,
                    target[2] + radius * az.cos(),
                ];
                Self::look_at(eye, target, [0.0, 1.0, 0.0], fov_y, width, height)
            })
            .collect()
    }
}

/// Screen-space footprint of one splat.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// `J·W·Σ·Wᵀ·Jᵀ + 0.3·I`.
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
}

/// `J` of the perspective map at camera-space point `p`.
pub(crate) fn projection_jacobian(cam: &Camera, p: Vec3) -> [[f64; 3]; 2] {
    let iz = 1.0 / p[2];
    [
        [cam.fx * iz, 0.0, -cam.fx * p[0] * iz * iz],
        [0.0, cam.fy * iz, -cam.fy * p[1] * iz * iz],
    ]
}

/// EWA projection; `None` when the point is not beyond the near plane.
pub fn project(mean: Vec3, cov: &Mat3, cam: &Camera, near: f64) -> Option<Projection> {
    let p = cam.to_camera(mean);
    if !(p[2] > near) {
        return None;
    }
    let j = projection_jacobian(cam, p);
    let w = &cam.rotation;
    let m = math::mat_mul(&math::mat_mul(w, cov), &math::transpose(w));
    let mut cov2d = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let mut s = 0.0;
            for i in 0..3 {
                for k in 0..3 {
                    s += j[a][i] * m[i][k] * j[b][k];
                }
            }
            cov2d[a][b] = s;
        }
    }
    cov2d[0][0] += COV2D_FLOOR;
    cov2d[1][1] += COV2D_FLOOR;
    Some(Projection {
        mean2d: [cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy],
        cov2d,
        depth: p[2],
    })
}

/// Unit vectors from the camera centre to each splat mean.
pub fn view_dirs(global: &GlobalSplats, cam: &Camera) -> Vec<Vec3> {
    let c = cam.center();
    global.mean.iter().map(|&m| math::normalize(math::sub(m, c))).collect()
}
