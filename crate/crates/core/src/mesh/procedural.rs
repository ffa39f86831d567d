use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{BlendMesh, Region};
use crate::math::{self, Vec3};

/// Parameters of the built-in ellipsoid head.
///
/// World axes: `+y` up, `+z` out of the face. Latitude is measured from the
/// top pole, azimuth from `+z` towards `+x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadSpec {
    pub rings: usize,
    pub segments: usize,
    pub radii: Vec3,
    pub expr_dim: usize,
    /// Peak displacement of each expression mode, world units.
    pub expr_amplitude: f64,
    /// Angular radius (radians) of the teeth band around the mouth centre.
    pub teeth_radius: f64,
    /// Angular radius of the lips band (faces outside the teeth band).
    pub lips_radius: f64,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            rings: 12,
            segments: 16,
            radii: [0.9, 1.15, 1.0],
            expr_dim: 6,
            expr_amplitude: 0.08,
            teeth_radius: 0.32,
            lips_radius: 0.62,
        }
    }
}

/// Latitude/azimuth of the mouth centre.
const MOUTH: (f64, f64) = (PI / 2.0 + 0.42, 0.0);

fn unit_dir(lat: f64, az: f64) -> Vec3 {
    [lat.sin() * az.sin(), lat.cos(), lat.sin() * az.cos()]
}

fn angle_between(a: Vec3, b: Vec3) -> f64 {
    math::dot(math::normalize(a), math::normalize(b)).clamp(-1.0, 1.0).acos()
}

impl HeadSpec {
    pub fn build(&self) -> BlendMesh {
        let rings = self.rings.max(3);
        let segs = self.segments.max(3);
        let mut dirs: Vec<Vec3> = vec![[0.0, 1.0, 0.0]];
        for i in 1..rings {
            let lat = PI * i as f64 / rings as f64;
            for j in 0..segs {
                let az = 2.0 * PI * j as f64 / segs as f64;
                dirs.push(unit_dir(lat, az));
            }
        }
        dirs.push([0.0, -1.0, 0.0]);
        let south = dirs.len() - 1;
        let ring = |i: usize, j: usize| 1 + (i - 1) * segs + (j % segs);

        let mut faces = Vec::new();
        for j in 0..segs {
            faces.push([0, ring(1, j), ring(1, j + 1)]);
        }
        for i in 1..rings - 1 {
            for j in 0..segs {
                let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
                faces.push([a, c, b]);
                faces.push([b, c, d]);
            }
        }
        for j in 0..segs {
            faces.push([ring(rings - 1, j), south, ring(rings - 1, j + 1)]);
        }

        let template: Vec<Vec3> = dirs
            .iter()
            .map(|d| [d[0] * self.radii[0], d[1] * self.radii[1], d[2] * self.radii[2]])
            .collect();
        // orient every face outward
        for f in &mut faces {
            let n = math::cross(
                math::sub(template[f[1]], template[f[0]]),
                math::sub(template[f[2]], template[f[0]]),
            );
            let centroid = math::add(math::add(template[f[0]], template[f[1]]), template[f[2]]);
            if math::dot(n, centroid) < 0.0 {
                f.swap(1, 2);
            }
        }

        let mouth = unit_dir(MOUTH.0, MOUTH.1);
        let region_tags: Vec<Region> = faces
            .iter()
            .map(|f| {
                let c = math::add(math::add(dirs[f[0]], dirs[f[1]]), dirs[f[2]]);
                let ang = angle_between(c, mouth);
                if ang < self.teeth_radius {
                    Region::Teeth
                } else if ang < self.lips_radius {
                    Region::Lips
                } else {
                    Region::Face
                }
            })
            .collect();
        let mut lip = vec![false; template.len()];
        for (f, t) in faces.iter().zip(&region_tags) {
            if *t == Region::Lips {
                for &v in f {
                    lip[v] = true;
                }
            }
        }
        let lip_vertex_ids = (0..template.len()).filter(|&v| lip[v]).collect();

        let e = self.expr_dim;
        let mut basis = vec![0.0; template.len() * 3 * e];
        for (v, d) in dirs.iter().enumerate() {
            let normal = math::normalize([
                d[0] / self.radii[0],
                d[1] / self.radii[1],
                d[2] / self.radii[2],
            ]);
            for k in 0..e {
                let disp = self.mode(k, *d, normal);
                for c in 0..3 {
                    basis[(v * 3 + c) * e + k] = disp[c];
                }
            }
        }
        BlendMesh::new(template, faces, basis, e, region_tags, lip_vertex_ids)
            .expect("procedural head is well formed")
    }

    /// Displacement of expression mode `k` at unit direction `d` with surface normal `n`.
    fn mode(&self, k: usize, d: Vec3, n: Vec3) -> Vec3 {
        let a = self.expr_amplitude;
        let bump = |lat: f64, az: f64, width: f64| {
            let ang = angle_between(d, unit_dir(lat, az));
            (-(ang / width).powi(2)).exp()
        };
        let (lat_m, az_m) = MOUTH;
        match k {
            // jaw drop
            0 => math::scale([0.0, -1.0, 0.25], a * bump(lat_m + 0.35, az_m, 0.55)),
            // lip stretch, away from the midline
            1 => math::scale([(d[0] / 0.15).tanh(), 0.0, 0.0], a * bump(lat_m, az_m, 0.4)),
            // pucker
            2 => math::scale(n, a * bump(lat_m, az_m, 0.3)),
            // brow raise
            3 => math::scale([0.0, 1.0, 0.0], a * bump(PI / 2.0 - 0.75, 0.0, 0.5)),
            // cheeks
            4 => math::scale(n, a * (bump(PI / 2.0 + 0.1, 0.8, 0.35) + bump(PI / 2.0 + 0.1, -0.8, 0.35))),
            // sinusoidal ripples
            _ => {
                let lat = d[1].clamp(-1.0, 1.0).acos();
                let az = d[0].atan2(d[2]);
                let f = (k - 3) as f64;
                math::scale(n, 0.5 * a * (f * az + 0.7 * f).sin() * (2.0 * lat).sin())
            }
        }
    }
}
