//! Rigged splat parameters and the local→global transform.
//!
//! Every splat lives in the frame of its parent triangle:
//! `μ' = k·R·μ + T`, `R' = R·rot(q)`, `s' = k·exp(log_s)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Quat, Vec3};
use crate::mesh::{FrameGrad, TriangleFrame};
use crate::tensor::AdamSlot;

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];
/// Rest local log-scale, `log(0.5)`.
pub const REST_LOG_SCALE: f64 = -std::f64::consts::LN_2;
/// Standard deviation of freshly sampled latent codes.
pub const LATENT_INIT_STD: f64 = 0.1;

/// Structure-of-arrays store for `G` splats with `L`-wide latents.
#[derive(Clone, Debug, PartialEq)]
pub struct RiggedGaussianSet {
    pub mu_local: Vec<Vec3>,
    pub q_local: Vec<Quat>,
    pub log_s: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    /// `G×L`, row-major.
    pub latent: Vec<f64>,
    pub latent_dim: usize,
    pub parent_face: Vec<usize>,
    pub static_rgb: Option<Vec<Vec3>>,
}

impl RiggedGaussianSet {
    pub fn empty(latent_dim: usize) -> Self {
        Self {
            mu_local: Vec::new(),
            q_local: Vec::new(),
            log_s: Vec::new(),
            opacity_logit: Vec::new(),
            latent: Vec::new(),
            latent_dim,
            parent_face: Vec::new(),
            static_rgb: None,
        }
    }

    pub fn len(&self) -> usize {
        self.parent_face.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent_face.is_empty()
    }

    pub fn latent_row(&self, i: usize) -> &[f64] {
        &self.latent[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn opacity(&self, i: usize) -> f64 {
        crate::tensor::sigmoid_scalar(self.opacity_logit[i])
    }

    /// A splat at the centroid of `face`: zero offset, identity rotation, rest scale, σ = 0.5.
    pub fn push_fresh<R: Rng>(&mut self, face: usize, rng: &mut R) {
        let normal = Normal::new(0.0, LATENT_INIT_STD).expect("positive std");
        self.mu_local.push([0.0; 3]);
        self.q_local.push(IDENTITY_QUAT);
        self.log_s.push([REST_LOG_SCALE; 3]);
        self.opacity_logit.push(0.0);
        for _ in 0..self.latent_dim {
            self.latent.push(normal.sample(rng));
        }
        self.parent_face.push(face);
        if let Some(rgb) = &mut self.static_rgb {
            rgb.push([0.5; 3]);
        }
    }

    /// Appends a copy of splat `i` of `other`.
    pub fn push_from(&mut self, other: &Self, i: usize) {
        self.mu_local.push(other.mu_local[i]);
        self.q_local.push(other.q_local[i]);
        self.log_s.push(other.log_s[i]);
        self.opacity_logit.push(other.opacity_logit[i]);
        self.latent.extend_from_slice(other.latent_row(i));
        self.parent_face.push(other.parent_face[i]);
        if let (Some(dst), Some(src)) = (&mut self.static_rgb, &other.static_rgb) {
            dst.push(src[i]);
        }
    }

    /// New set made of the listed splats, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::empty(self.latent_dim);
        out.static_rgb = self.static_rgb.as_ref().map(|_| Vec::with_capacity(idx.len()));
        for &i in idx {
            out.push_from(self, i);
        }
        out
    }

    pub fn normalize_quats(&mut self) {
        for q in &mut self.q_local {
            *q = math::quat_normalize(*q);
        }
    }

    pub fn validate(&self, face_count: usize) -> Result<()> {
        let g = self.len();
        let lens = [
            self.mu_local.len(),
            self.q_local.len(),
            self.log_s.len(),
            self.opacity_logit.len(),
            self.latent.len() / self.latent_dim.max(1),
        ];
        if lens.iter().any(|&l| l != g) || self.latent.len() != g * self.latent_dim {
            return Err(Error::Invalid(format!("splat arrays disagree on count {g}: {lens:?}")));
        }
        if let Some(f) = self.parent_face.iter().find(|&&f| f >= face_count) {
            return Err(Error::Invalid(format!("parent face {f} out of range for {face_count} faces")));
        }
        let finite = self.mu_local.iter().flatten().all(|v| v.is_finite())
            && self.q_local.iter().flatten().all(|v| v.is_finite())
            && self.log_s.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logit.iter().all(|v| v.is_finite())
            && self.latent.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("splat attributes".into()));
        }
        Ok(())
    }
}

/// One splat per face at its centroid with rest attributes and a seeded latent.
pub fn bind_gaussians<R: Rng>(frames: &[TriangleFrame], latent_dim: usize, rng: &mut R) -> RiggedGaussianSet {
    let mut set = RiggedGaussianSet::empty(latent_dim);
    for f in 0..frames.len() {
        set.push_fresh(f, rng);
    }
    set
}

/// World-space splats.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSplats {
    pub mean: Vec<Vec3>,
    /// `R·rot(q̂)` for each splat.
    pub rotation: Vec<Mat3>,
    pub scale: Vec<Vec3>,
    pub opacity: Vec<f64>,
}

impl GlobalSplats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// `q' = quat(R) ⊗ q̂` (Hamilton, left composition).
    pub fn quaternion(&self, i: usize) -> Quat {
        math::mat_to_quat(&self.rotation[i])
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        covariance_from_rotation(&self.rotation[i], self.scale[i])
    }
}

pub fn to_global(set: &RiggedGaussianSet, frames: &[TriangleFrame]) -> GlobalSplats {
    let g = set.len();
    let mut out = GlobalSplats {
        mean: Vec::with_capacity(g),
        rotation: Vec::with_capacity(g),
        scale: Vec::with_capacity(g),
        opacity: Vec::with_capacity(g),
    };
    for i in 0..g {
        let fr = &frames[set.parent_face[i]];
        let rmu = math::mat_vec(&fr.rotation, set.mu_local[i]);
        out.mean.push(math::add(math::scale(rmu, fr.scale), fr.translation));
        let rq = math::quat_to_mat(math::quat_normalize(set.q_local[i]));
        out.rotation.push(math::mat_mul(&fr.rotation, &rq));
        out.scale.push(set.log_s[i].map(|l| fr.scale * l.exp()));
        out.opacity.push(set.opacity(i));
    }
    out
}

/// Upstream gradients on [`GlobalSplats`] fields (opacity is w.r.t. the logit).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalGrad {
    pub mean: Vec<Vec3>,
    pub rotation: Vec<Mat3>,
    pub scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
}

impl GlobalGrad {
    pub fn zeros(g: usize) -> Self {
        Self {
            mean: vec![[0.0; 3]; g],
            rotation: vec![[[0.0; 3]; 3]; g],
            scale: vec![[0.0; 3]; g],
            opacity_logit: vec![0.0; g],
        }
    }
}

/// Gradients on the local splat attributes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalGrad {
    pub mu_local: Vec<Vec3>,
    pub q_local: Vec<Quat>,
    pub log_s: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
}

/// Backward of [`to_global`]: local attribute gradients plus per-face frame gradients.
pub fn to_global_backward(
    set: &RiggedGaussianSet,
    frames: &[TriangleFrame],
    grad: &GlobalGrad,
) -> (LocalGrad, Vec<FrameGrad>) {
    let g = set.len();
    let mut local = LocalGrad {
        mu_local: vec![[0.0; 3]; g],
        q_local: vec![[0.0; 4]; g],
        log_s: vec![[0.0; 3]; g],
        opacity_logit: grad.opacity_logit.clone(),
    };
    let mut fg = vec![FrameGrad::default(); frames.len()];
    for i in 0..g {
        let f = set.parent_face[i];
        let fr = &frames[f];
        let acc = &mut fg[f];

        let gm = grad.mean[i];
        let mu = set.mu_local[i];
        local.mu_local[i] = math::scale(math::mat_t_vec(&fr.rotation, gm), fr.scale);
        acc.rotation = math::mat_add(&acc.rotation, &math::outer(math::scale(gm, fr.scale), mu));
        acc.scale += math::dot(gm, math::mat_vec(&fr.rotation, mu));
        acc.translation = math::add(acc.translation, gm);

        let qn = math::quat_normalize(set.q_local[i]);
        let rq = math::quat_to_mat(qn);
        let gr = &grad.rotation[i];
        acc.rotation = math::mat_add(&acc.rotation, &math::mat_mul(gr, &math::transpose(&rq)));
        let g_rq = math::mat_mul(&math::transpose(&fr.rotation), gr);
        let g_qn = math::quat_to_mat_backward(qn, &g_rq);
        local.q_local[i] = math::quat_normalize_backward(set.q_local[i], g_qn);

        let gs = grad.scale[i];
        for c in 0..3 {
            let e = set.log_s[i][c].exp();
            local.log_s[i][c] = gs[c] * fr.scale * e;
            acc.scale += gs[c] * e;
        }
    }
    (local, fg)
}

/// `Σ = rot(q')·diag(s'²)·rot(q')ᵀ`.
pub fn covariance(q: Quat, s: Vec3) -> Mat3 {
    covariance_from_rotation(&math::quat_to_mat(q), s)
}

pub fn covariance_from_rotation(r: &Mat3, s: Vec3) -> Mat3 {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    math::mat_mul(&m, &math::transpose(&m))
}

/// Pruning score `σ·s'x·s'y·s'z` on global scales.
pub fn volume_score(set: &RiggedGaussianSet, frames: &[TriangleFrame]) -> Vec<f64> {
    (0..set.len())
        .map(|i| {
            let k = frames[set.parent_face[i]].scale;
            let [a, b, c] = set.log_s[i];
            set.opacity(i) * (k * a.exp()) * (k * b.exp()) * (k * c.exp())
        })
        .collect()
}

/// Adam moments for every per-splat attribute; rows follow the splat order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatAdam {
    pub mu_local: AdamSlot,
    pub q_local: AdamSlot,
    pub log_s: AdamSlot,
    pub opacity_logit: AdamSlot,
    pub latent: AdamSlot,
}

impl SplatAdam {
    pub fn new(set: &RiggedGaussianSet) -> Self {
        let g = set.len();
        Self {
            mu_local: AdamSlot::new(g * 3),
            q_local: AdamSlot::new(g * 4),
            log_s: AdamSlot::new(g * 3),
            opacity_logit: AdamSlot::new(g),
            latent: AdamSlot::new(g * set.latent_dim),
        }
    }

    /// Follows a density-control restructure; `mapping[new] = Some(old)` keeps moments.
    pub fn remap(&mut self, mapping: &[Option<usize>], latent_dim: usize) {
        self.mu_local.remap_rows(mapping, 3);
        self.q_local.remap_rows(mapping, 4);
        self.log_s.remap_rows(mapping, 3);
        self.opacity_logit.remap_rows(mapping, 1);
        self.latent.remap_rows(mapping, latent_dim);
    }
}

pub(crate) fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

pub(crate) fn flat4(v: &[Quat]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

pub(crate) fn unflat3(dst: &mut [Vec3], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.chunks(3)) {
        d.copy_from_slice(s);
    }
}

pub(crate) fn unflat4(dst: &mut [Quat], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src.chunks(4)) {
        d.copy_from_slice(s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_err};
    use crate::mesh::{triangle_frames, triangle_frames_backward, HeadSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(scale: f64) -> TriangleFrame {
        TriangleFrame {
            rotation: math::IDENTITY3,
            translation: [0.0; 3],
            scale,
        }
    }

    fn random_set(faces: usize, per_face: usize, seed: u64) -> RiggedGaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = RiggedGaussianSet::empty(2);
        for f in 0..faces {
            for _ in 0..per_face {
                s.push_fresh(f, &mut rng);
                let i = s.len() - 1;
                s.mu_local[i] = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                s.q_local[i] = [rng.random_range(0.5..1.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                s.log_s[i] = [rng.random_range(-1.5..0.0), rng.random_range(-1.5..0.0), rng.random_range(-1.5..0.0)];
                s.opacity_logit[i] = rng.random_range(-2.0..2.0);
            }
        }
        s
    }

    #[test]
    fn bind_places_one_splat_at_each_centroid() {
        let m = HeadSpec { rings: 5, segments: 6, ..HeadSpec::default() }.build();
        let frames = triangle_frames(&m.template, &m.faces).unwrap();
        let set = bind_gaussians(&frames, 8, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(set.len(), m.face_count());
        set.validate(m.face_count()).unwrap();
        let g = to_global(&set, &frames);
        for (i, fr) in frames.iter().enumerate() {
            assert_eq!(g.mean[i], fr.translation);
            assert_eq!(set.parent_face[i], i);
            assert!((set.opacity(i) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn teeth_density_quadruples_after_subdivision() {
        use crate::mesh::Region;
        let m = HeadSpec::default().build();
        let sub = m.subdivide_region(Region::Teeth).unwrap();
        let count = |mesh: &crate::mesh::BlendMesh| {
            let frames = triangle_frames(&mesh.template, &mesh.faces).unwrap();
            let set = bind_gaussians(&frames, 4, &mut ChaCha8Rng::seed_from_u64(1));
            set.parent_face.iter().filter(|&&f| mesh.region_tags[f] == Region::Teeth).count()
        };
        assert_eq!(count(&sub), 4 * count(&m));
    }

    #[test]
    fn plug_in_example() {
        let mut s = RiggedGaussianSet::empty(1);
        s.push_fresh(0, &mut ChaCha8Rng::seed_from_u64(0));
        s.mu_local[0] = [1.0, 0.0, 0.0];
        let g = to_global(&s, &[frame(2.0)]);
        assert_eq!(g.mean[0], [2.0, 0.0, 0.0]);
        assert_eq!(g.scale[0], [1.0; 3]);
    }

    #[test]
    fn global_quaternion_composes_on_the_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_set(1, 1, 3);
        let r = math::axis_angle([rng.random(), rng.random(), 1.0], 0.8);
        let fr = TriangleFrame { rotation: r, translation: [0.0; 3], scale: 1.0 };
        let g = to_global(&s, &[fr]);
        let mut want = math::quat_mul(math::mat_to_quat(&r), math::quat_normalize(s.q_local[0]));
        if want[0] < 0.0 {
            want = want.map(|v| -v);
        }
        let got = g.quaternion(0);
        for k in 0..4 {
            assert!((got[k] - want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_examples() {
        let c = covariance(IDENTITY_QUAT, [1.0, 2.0, 3.0]);
        assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]]);
        let q = math::quat_normalize([0.3, -0.7, 0.2, 0.5]);
        let c = covariance(q, [0.5; 3]);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.25 } else { 0.0 };
                assert!((c[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q = math::quat_normalize([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            let s = [rng.random_range(0.1..2.0), rng.random_range(0.1..2.0), rng.random_range(0.1..2.0)];
            let c = covariance(q, s);
            let m = nalgebra::Matrix3::from_fn(|i, j| c[i][j]);
            assert!((m - m.transpose()).abs().max() < 1e-12);
            let mut ev: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut want: Vec<f64> = s.iter().map(|v| v * v).collect();
            want.sort_by(f64::total_cmp);
            for k in 0..3 {
                assert!((ev[k] - want[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn volume_score_examples() {
        let mut s = RiggedGaussianSet::empty(1);
        s.push_fresh(0, &mut ChaCha8Rng::seed_from_u64(0));
        s.log_s[0] = [0.0; 3];
        s.opacity_logit[0] = 40.0;
        assert!((volume_score(&s, &[frame(1.0)])[0] - 1.0).abs() < 1e-15);
        s.opacity_logit[0] = 0.0;
        s.log_s[0] = [2f64.ln(), 0.0, 0.0];
        assert!((volume_score(&s, &[frame(1.0)])[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn volume_score_matches_recompute() {
        let m = HeadSpec { rings: 5, segments: 6, ..HeadSpec::default() }.build();
        let frames = triangle_frames(&m.template, &m.faces).unwrap();
        let s = random_set(m.face_count(), 2, 4);
        let scores = volume_score(&s, &frames);
        let g = to_global(&s, &frames);
        for i in 0..s.len() {
            let want = g.opacity[i] * g.scale[i].iter().product::<f64>();
            assert!((scores[i] - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
    }

    /// A scalar of the global splats with fixed random weights; used for FD checks.
    fn probe(g: &GlobalSplats, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut k = 0;
        for i in 0..g.len() {
            for c in 0..3 {
                acc += w[k] * g.mean[i][c];
                acc += w[k + 1] * g.scale[i][c];
                for r in 0..3 {
                    acc += w[k + 2 + r] * g.rotation[i][r][c];
                }
                k += 5;
            }
        }
        acc
    }

    fn probe_grad(g: &GlobalSplats, w: &[f64]) -> GlobalGrad {
        let mut out = GlobalGrad::zeros(g.len());
        let mut k = 0;
        for i in 0..g.len() {
            for c in 0..3 {
                out.mean[i][c] = w[k];
                out.scale[i][c] = w[k + 1];
                for r in 0..3 {
                    out.rotation[i][r][c] = w[k + 2 + r];
                }
                k += 5;
            }
        }
        out
    }

    #[test]
    fn to_global_gradient_reaches_vertices_and_locals() {
        let m = HeadSpec { rings: 4, segments: 5, ..HeadSpec::default() }.build();
        let faces = m.faces.clone();
        for seed in 0..5 {
            let s = random_set(m.face_count(), 2, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w: Vec<f64> = (0..s.len() * 15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pos0 = flat3(&m.template);

            let eval = |pos: &[f64], s: &RiggedGaussianSet| {
                let mut p = vec![[0.0; 3]; pos.len() / 3];
                unflat3(&mut p, pos);
                probe(&to_global(s, &triangle_frames(&p, &faces).unwrap()), &w)
            };
            let frames = triangle_frames(&m.template, &faces).unwrap();
            let g = to_global(&s, &frames);
            let (local, fg) = to_global_backward(&s, &frames, &probe_grad(&g, &w));
            let gv = flat3(&triangle_frames_backward(&m.template, &faces, &fg));
            let nv = numeric_grad(|p| eval(p, &s), &pos0, 1e-6);
            assert!(rel_err(&gv, &nv) < 1e-5, "vertices");

            let mu0 = flat3(&s.mu_local);
            let nm = numeric_grad(|x| { let mut t = s.clone(); unflat3(&mut t.mu_local, x); eval(&pos0, &t) }, &mu0, 1e-6);
            assert!(rel_err(&flat3(&local.mu_local), &nm) < 1e-6, "mu");
            let q0 = flat4(&s.q_local);
            let nq = numeric_grad(|x| { let mut t = s.clone(); unflat4(&mut t.q_local, x); eval(&pos0, &t) }, &q0, 1e-6);
            assert!(rel_err(&flat4(&local.q_local), &nq) < 1e-6, "q");
            let l0 = flat3(&s.log_s);
            let nl = numeric_grad(|x| { let mut t = s.clone(); unflat3(&mut t.log_s, x); eval(&pos0, &t) }, &l0, 1e-6);
            assert!(rel_err(&flat3(&local.log_s), &nl) < 1e-6, "log_s");
        }
    }

    #[test]
    fn validate_catches_bad_parent() {
        let mut s = random_set(2, 1, 0);
        s.parent_face[1] = 5;
        assert!(s.validate(2).is_err());
    }
}
