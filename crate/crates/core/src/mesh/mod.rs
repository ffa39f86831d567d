//! Linear blendshape face mesh, per-triangle frames and region subdivision.

mod io;
mod procedural;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use io::{load_mesh, save_mesh};
pub use procedural::HeadSpec;

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};

/// Minimum triangle area accepted by [`triangle_frames`].
pub const MIN_AREA: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Face,
    Lips,
    Teeth,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Face => "face",
            Region::Lips => "lips",
            Region::Teeth => "teeth",
        }
    }
}

impl std::str::FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(Region::Face),
            "lips" => Ok(Region::Lips),
            "teeth" => Ok(Region::Teeth),
            other => Err(Error::Invalid(format!("unknown region tag {other:?}"))),
        }
    }
}

/// Template vertices plus a linear expression basis.
///
/// `expr_basis` is laid out `[V][3][E]`: the displacement of vertex `v`,
/// coordinate `c` for unit expression `e` is `expr_basis[(v * 3 + c) * E + e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendMesh {
    pub template: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub expr_basis: Vec<f64>,
    pub expr_dim: usize,
    pub region_tags: Vec<Region>,
    pub lip_vertex_ids: Vec<usize>,
}

impl BlendMesh {
    pub fn new(
        template: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        expr_basis: Vec<f64>,
        expr_dim: usize,
        region_tags: Vec<Region>,
        lip_vertex_ids: Vec<usize>,
    ) -> Result<Self> {
        let v = template.len();
        if expr_basis.len() != v * 3 * expr_dim {
            return Err(Error::shape(
                "blend_mesh",
                format!("basis has {} values, expected {v}×3×{expr_dim}", expr_basis.len()),
            ));
        }
        if region_tags.len() != faces.len() {
            return Err(Error::shape("blend_mesh", "one region tag per face required"));
        }
        if let Some((i, f)) = faces.iter().enumerate().find(|(_, f)| f.iter().any(|&x| x >= v)) {
            return Err(Error::Invalid(format!("face {i} {f:?} indexes past {v} vertices")));
        }
        if lip_vertex_ids.iter().any(|&i| i >= v) {
            return Err(Error::Invalid("lip vertex id out of range".into()));
        }
        Ok(Self {
            template,
            faces,
            expr_basis,
            expr_dim,
            region_tags,
            lip_vertex_ids,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.template.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// `template + basis·ψ + offsets`.
    pub fn evaluate(&self, psi: &[f64], offsets: Option<&[Vec3]>) -> Result<Vec<Vec3>> {
        if psi.len() != self.expr_dim {
            return Err(Error::shape(
                "evaluate_mesh",
                format!("expression has {} entries, basis expects {}", psi.len(), self.expr_dim),
            ));
        }
        if let Some(o) = offsets {
            if o.len() != self.template.len() {
                return Err(Error::shape(
                    "evaluate_mesh",
                    format!("{} offsets for {} vertices", o.len(), self.template.len()),
                ));
            }
        }
        let e = self.expr_dim;
        Ok(self
            .template
            .iter()
            .enumerate()
            .map(|(v, t)| {
                let mut p = *t;
                for (c, pc) in p.iter_mut().enumerate() {
                    let row = &self.expr_basis[(v * 3 + c) * e..(v * 3 + c + 1) * e];
                    *pc += row.iter().zip(psi).map(|(b, w)| b * w).sum::<f64>();
                    if let Some(o) = offsets {
                        *pc += o[v][c];
                    }
                }
                p
            })
            .collect())
    }

    pub fn faces_in(&self, region: Region) -> Vec<usize> {
        (0..self.faces.len()).filter(|&f| self.region_tags[f] == region).collect()
    }

    /// Replaces every face tagged `region` with four faces through its edge midpoints.
    ///
    /// Midpoints are shared between adjacent tagged faces; their basis rows are the
    /// mean of the edge endpoints' rows so evaluation and subdivision commute.
    pub fn subdivide_region(&self, region: Region) -> Result<BlendMesh> {
        if !self.region_tags.contains(&region) {
            return Err(Error::Invalid(format!("region {} has no faces", region.as_str())));
        }
        let e = self.expr_dim;
        let mut template = self.template.clone();
        let mut basis = self.expr_basis.clone();
        let mut lips: Vec<bool> = vec![false; self.template.len()];
        for &i in &self.lip_vertex_ids {
            lips[i] = true;
        }
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut faces = Vec::with_capacity(self.faces.len());
        let mut tags = Vec::with_capacity(self.faces.len());
        for (fi, f) in self.faces.iter().enumerate() {
            let tag = self.region_tags[fi];
            if tag != region {
                faces.push(*f);
                tags.push(tag);
                continue;
            }
            let mut mid = |a: usize, b: usize| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    let idx = template.len();
                    template.push(math::scale(math::add(template[a], template[b]), 0.5));
                    for c in 0..3 {
                        for k in 0..e {
                            let v = 0.5 * (basis[(a * 3 + c) * e + k] + basis[(b * 3 + c) * e + k]);
                            basis.push(v);
                        }
                    }
                    lips.push(lips[a] && lips[b]);
                    idx
                })
            };
            let [a, b, c] = *f;
            let ab = mid(a, b);
            let bc = mid(b, c);
            let ca = mid(c, a);
            faces.extend([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]);
            tags.extend([tag; 4]);
        }
        let lip_vertex_ids = lips.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect();
        BlendMesh::new(template, faces, basis, e, tags, lip_vertex_ids)
    }

    /// Stable digest of the mesh contents (hex SHA-256 of its on-disk form).
    pub fn content_hash(&self) -> String {
        io::content_hash(self)
    }
}

/// Local frame of one triangle: `x_world = k·R·x_local + T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangleFrame {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

/// Upstream gradient on one [`TriangleFrame`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameGrad {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
}

/// Frames of all faces: `R = [ê, n̂×ê, n̂]` with `ê` along the first edge,
/// `T` the vertex mean and `k = sqrt(2·area)`.
pub fn triangle_frames(positions: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<TriangleFrame>> {
    faces
        .iter()
        .enumerate()
        .map(|(fi, &[a, b, c])| {
            let (p0, p1, p2) = (positions[a], positions[b], positions[c]);
            let e1 = math::sub(p1, p0);
            let e2 = math::sub(p2, p0);
            let cr = math::cross(e1, e2);
            let twice_area = math::norm(cr);
            if !(twice_area > 2.0 * MIN_AREA) || math::norm(e1) == 0.0 {
                return Err(Error::DegenerateFace { face: fi, area: twice_area });
            }
            let n = math::scale(cr, 1.0 / twice_area);
            let ex = math::normalize(e1);
            let ey = math::cross(n, ex);
            Ok(TriangleFrame {
                rotation: math::from_columns(ex, ey, n),
                translation: math::scale(math::add(math::add(p0, p1), p2), 1.0 / 3.0),
                scale: twice_area.sqrt(),
            })
        })
        .collect()
}

/// Chains per-face frame gradients back to vertex positions.
pub fn triangle_frames_backward(positions: &[Vec3], faces: &[[usize; 3]], grads: &[FrameGrad]) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; positions.len()];
    for (&[a, b, c], g) in faces.iter().zip(grads) {
        let (p0, p1, p2) = (positions[a], positions[b], positions[c]);
        let e1 = math::sub(p1, p0);
        let e2 = math::sub(p2, p0);
        let cr = math::cross(e1, e2);
        let cn = math::norm(cr);
        let n = math::scale(cr, 1.0 / cn);
        let ex = math::normalize(e1);
        let g_ex = math::column(&g.rotation, 0);
        let g_ey = math::column(&g.rotation, 1);
        let g_n = math::column(&g.rotation, 2);
        // ey = n × ex
        let g_n = math::add(g_n, math::cross(ex, g_ey));
        let g_ex = math::add(g_ex, math::cross(g_ey, n));
        // k = |c|^(1/2)
        let mut g_cr = math::scale(cr, g.scale / (2.0 * cn.powf(1.5)));
        g_cr = math::add(g_cr, math::normalize_backward(cr, g_n));
        let mut g_e1 = math::normalize_backward(e1, g_ex);
        g_e1 = math::add(g_e1, math::cross(e2, g_cr));
        let g_e2 = math::cross(g_cr, e1);
        let t3 = math::scale(g.translation, 1.0 / 3.0);
        out[a] = math::add(out[a], math::sub(t3, math::add(g_e1, g_e2)));
        out[b] = math::add(out[b], math::add(t3, g_e1));
        out[c] = math::add(out[c], math::add(t3, g_e2));
    }
    out
}
