use super::{project, Camera, DEFAULT_NEAR};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::TriangleFrame;
use crate::splats::{to_global, GlobalSplats, RiggedGaussianSet};

pub const ALPHA_MAX: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Contributions beyond this squared Mahalanobis distance (3σ) are dropped.
pub const CUTOFF_SQ: f64 = 9.0;
pub const TILE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub near: f64,
    pub background: Vec3,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            near: DEFAULT_NEAR,
            background: [1.0; 3],
        }
    }
}

/// Per-splat screen data used by both render paths and the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Prepared {
    pub mean2d: [f64; 2],
    /// Inverse 2D covariance `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub opacity: f64,
    /// Pixel box `[x0, x1) × [y0, y1)`, clipped to the image.
    pub bbox: [usize; 4],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Contributor {
    pub splat: u32,
    pub alpha: f64,
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct RenderState {
    pub global: GlobalSplats,
    pub colors: Vec<Vec3>,
    pub camera: Camera,
    pub settings: RenderSettings,
    pub prepared: Vec<Option<Prepared>>,
    /// `contributors[offsets[p]..offsets[p + 1]]` belong to pixel `p`, front to back.
    pub offsets: Vec<usize>,
    pub contributors: Vec<Contributor>,
    pub final_t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Channel-planar `3×H×W`.
    pub rgb: Vec<f64>,
    /// `1 − Π(1 − α_i)` per pixel.
    pub alpha: Vec<f64>,
    pub(crate) state: Option<Box<RenderState>>,
}

impl RenderOutput {
    /// Drops the per-pixel lists kept for the backward pass.
    pub fn without_state(mut self) -> Self {
        self.state = None;
        self
    }

    pub fn has_state(&self) -> bool {
        self.state.is_some()
    }

    pub fn pixel(&self, x: usize, y: usize) -> Vec3 {
        let hw = self.width * self.height;
        let p = y * self.width + x;
        [self.rgb[p], self.rgb[hw + p], self.rgb[2 * hw + p]]
    }

    /// Number of splats composited at each pixel.
    pub fn contributor_counts(&self) -> Option<Vec<usize>> {
        self.state
            .as_ref()
            .map(|s| s.offsets.windows(2).map(|w| w[1] - w[0]).collect())
    }
}

fn check_inputs(global: &GlobalSplats, colors: &[Vec3], cam: &Camera) -> Result<()> {
    cam.validate()?;
    if colors.len() != global.len() {
        return Err(Error::shape(
            "render",
            format!("{} colors for {} splats", colors.len(), global.len()),
        ));
    }
    let finite = global.mean.iter().flatten().all(|v| v.is_finite())
        && global.rotation.iter().flatten().flatten().all(|v| v.is_finite())
        && global.scale.iter().flatten().all(|v| v.is_finite())
        && global.opacity.iter().all(|v| v.is_finite())
        && colors.iter().flatten().all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("render inputs".into()));
    }
    Ok(())
}

fn prepare(global: &GlobalSplats, cam: &Camera, near: f64) -> Vec<Option<Prepared>> {
    (0..global.len())
        .map(|i| {
            let p = project(global.mean[i], &global.covariance(i), cam, near)?;
            let [[a, b], [_, d]] = p.cov2d;
            let det = a * d - b * b;
            if !(det > 0.0) {
                return None;
            }
            let conic = [d / det, -b / det, a / det];
            let mid = 0.5 * (a + d);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            // generous so nothing outside the box can pass the cutoff test
            let r = 3.0 * lambda_max.sqrt() * 1.001 + 1.0;
            let [mx, my] = p.mean2d;
            // pixel centres x + 0.5 within [m − r, m + r]
            let lo = |m: f64| (m - r - 0.5).floor().max(0.0) as usize;
            let hi = |m: f64, n: usize| ((m + r - 0.5).ceil().max(-1.0) + 1.0).min(n as f64) as usize;
            let bbox = [lo(mx), hi(mx, cam.width), lo(my), hi(my, cam.height)];
            if bbox[0] >= bbox[1] || bbox[2] >= bbox[3] {
                return None;
            }
            Some(Prepared {
                mean2d: p.mean2d,
                conic,
                cov2d: p.cov2d,
                depth: p.depth,
                opacity: global.opacity[i],
                bbox,
            })
        })
        .collect()
}

/// `(α, clamped)` of a splat at pixel centre `(px, py)`, `None` beyond the cutoff.
#[inline]
pub(crate) fn splat_alpha(s: &Prepared, px: f64, py: f64) -> Option<(f64, bool)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if !(q <= CUTOFF_SQ) {
        return None;
    }
    let raw = s.opacity * (-0.5 * q).exp();
    if raw > ALPHA_MAX {
        Some((ALPHA_MAX, true))
    } else {
        Some((raw, false))
    }
}

/// Front-to-back compositing of one pixel over `order`; returns `(rgb, T_final)`.
#[inline]
fn composite(
    x: usize,
    y: usize,
    order: impl Iterator<Item = usize>,
    prepared: &[Option<Prepared>],
    colors: &[Vec3],
    background: Vec3,
    out: &mut Vec<Contributor>,
) -> (Vec3, f64) {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for i in order {
        let Some(s) = &prepared[i] else { continue };
        let Some((alpha, clamped)) = splat_alpha(s, px, py) else { continue };
        let next_t = t * (1.0 - alpha);
        if next_t < MIN_TRANSMITTANCE {
            break;
        }
        let w = alpha * t;
        for k in 0..3 {
            c[k] += colors[i][k] * w;
        }
        out.push(Contributor { splat: i as u32, alpha, clamped });
        t = next_t;
    }
    for k in 0..3 {
        c[k] += t * background[k];
    }
    (c, t)
}

/// Visible splats sorted by depth, ties by index.
fn depth_order(prepared: &[Option<Prepared>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..prepared.len()).filter(|&i| prepared[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (prepared[a].unwrap().depth, prepared[b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });
    order
}

fn assemble(
    global: &GlobalSplats,
    colors: &[Vec3],
    cam: &Camera,
    settings: &RenderSettings,
    prepared: Vec<Option<Prepared>>,
    per_pixel: impl Fn(usize, usize, &mut Vec<Contributor>) -> (Vec3, f64),
) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let hw = w * h;
    let mut rgb = vec![0.0; 3 * hw];
    let mut alpha = vec![0.0; hw];
    let mut final_t = vec![0.0; hw];
    let mut offsets = Vec::with_capacity(hw + 1);
    let mut contributors = Vec::new();
    offsets.push(0);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (c, t) = per_pixel(x, y, &mut contributors);
            for k in 0..3 {
                rgb[k * hw + p] = c[k];
            }
            alpha[p] = 1.0 - t;
            final_t[p] = t;
            offsets.push(contributors.len());
        }
    }
    RenderOutput {
        width: w,
        height: h,
        rgb,
        alpha,
        state: Some(Box::new(RenderState {
            global: global.clone(),
            colors: colors.to_vec(),
            camera: cam.clone(),
            settings: settings.clone(),
            prepared,
            offsets,
            contributors,
            final_t,
        })),
    }
}

/// Tiled renderer of world-space splats.
pub fn render_global(global: &GlobalSplats, colors: &[Vec3], cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    check_inputs(global, colors, cam)?;
    let prepared = prepare(global, cam, settings.near);
    let order = depth_order(&prepared);
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); tiles_x * tiles_y];
    for &i in &order {
        let b = prepared[i].unwrap().bbox;
        for ty in b[2] / TILE..=(b[3] - 1) / TILE {
            for tx in b[0] / TILE..=(b[1] - 1) / TILE {
                bins[ty * tiles_x + tx].push(i);
            }
        }
    }
    let bg = settings.background;
    Ok(assemble(global, colors, cam, settings, prepared.clone(), |x, y, out| {
        let bin = &bins[(y / TILE) * tiles_x + x / TILE];
        composite(x, y, bin.iter().copied(), &prepared, colors, bg, out)
    }))
}

/// Reference path: every pixel walks every visible splat in sorted order.
pub fn render_naive(global: &GlobalSplats, colors: &[Vec3], cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
    check_inputs(global, colors, cam)?;
    let prepared = prepare(global, cam, settings.near);
    let order = depth_order(&prepared);
    let bg = settings.background;
    Ok(assemble(global, colors, cam, settings, prepared.clone(), |x, y, out| {
        composite(x, y, order.iter().copied(), &prepared, colors, bg, out)
    }))
}

/// Rigged entry point: local splats posed by `frames`, then rendered.
pub fn render(
    set: &RiggedGaussianSet,
    frames: &[TriangleFrame],
    colors: &[Vec3],
    cam: &Camera,
    settings: &RenderSettings,
) -> Result<RenderOutput> {
    render_global(&to_global(set, frames), colors, cam, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0], 0.6, w, h)
    }

    fn splats(means: &[Vec3], scale: f64, opacity: f64) -> GlobalSplats {
        GlobalSplats {
            mean: means.to_vec(),
            rotation: vec![math::IDENTITY3; means.len()],
            scale: vec![[scale; 3]; means.len()],
            opacity: vec![opacity; means.len()],
        }
    }

    #[test]
    fn zero_splats_is_white() {
        let out = render_global(&splats(&[], 0.1, 0.5), &[], &cam(8, 6), &RenderSettings::default()).unwrap();
        assert!(out.rgb.iter().all(|&v| v == 1.0));
        assert!(out.alpha.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_splat_centred_on_pixel() {
        let c = cam(9, 9);
        // mean2d lands on the centre of pixel (4, 4)
        let g = splats(&[[0.0; 3]], 0.05, 0.7);
        let color = [0.2, 0.4, 0.6];
        let out = render_global(&g, &[color], &c, &RenderSettings::default()).unwrap();
        let px = out.pixel(4, 4);
        for k in 0..3 {
            let want = color[k] * 0.7 + 1.0 * (1.0 - 0.7);
            assert!((px[k] - want).abs() < 1e-15);
        }
        assert!((out.alpha[4 * 9 + 4] - 0.7).abs() < 1e-15);
        // fully opaque splat clamps at 0.99
        let g = splats(&[[0.0; 3]], 0.05, 1.0);
        let out = render_global(&g, &[color], &c, &RenderSettings::default()).unwrap();
        assert!((out.alpha[4 * 9 + 4] - ALPHA_MAX).abs() < 1e-15);
    }

    #[test]
    fn brute_force_blending_oracle() {
        let c = cam(12, 10);
        let g = splats(&[[0.05, 0.0, 0.0], [-0.05, 0.02, 0.3], [0.0, -0.04, -0.2]], 0.12, 0.6);
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let out = render_global(&g, &colors, &c, &RenderSettings::default()).unwrap();
        let prepared = prepare(&g, &c, DEFAULT_NEAR);
        // explicit sort by depth, then the blending sum term by term
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&a, &b| prepared[a].unwrap().depth.total_cmp(&prepared[b].unwrap().depth));
        for y in 0..10 {
            for x in 0..12 {
                let mut want = [0.0; 3];
                let mut prod = 1.0;
                for &i in &idx {
                    let s = prepared[i].unwrap();
                    let a = splat_alpha(&s, x as f64 + 0.5, y as f64 + 0.5).map_or(0.0, |v| v.0);
                    for k in 0..3 {
                        want[k] += colors[i][k] * a * prod;
                    }
                    prod *= 1.0 - a;
                }
                let got = out.pixel(x, y);
                for k in 0..3 {
                    assert!((got[k] - (want[k] + prod)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn tile_path_matches_naive_bitwise() {
        let c = cam(40, 36);
        let means: Vec<Vec3> = (0..30).map(|i| {
            let t = i as f64;
            [0.5 * (t * 0.7).sin(), 0.5 * (t * 1.3).cos(), 0.3 * (t * 0.4).sin()]
        }).collect();
        let g = splats(&means, 0.08, 0.8);
        let colors: Vec<Vec3> = (0..30).map(|i| [(i % 3) as f64 / 2.0, (i % 5) as f64 / 4.0, 0.3]).collect();
        let a = render_global(&g, &colors, &c, &RenderSettings::default()).unwrap();
        let b = render_naive(&g, &colors, &c, &RenderSettings::default()).unwrap();
        assert!(a.rgb.iter().zip(&b.rgb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.alpha.iter().zip(&b.alpha).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn equal_depths_break_ties_by_index() {
        let c = cam(8, 8);
        let g = splats(&[[0.0; 3], [0.0; 3]], 0.1, 0.5);
        let out = render_global(&g, &[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], &c, &RenderSettings::default()).unwrap();
        let s = out.state.as_ref().unwrap();
        let p = 4 * 8 + 4;
        let list = &s.contributors[s.offsets[p]..s.offsets[p + 1]];
        assert_eq!(list.iter().map(|c| c.splat).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut g = splats(&[[0.0; 3]], 0.1, 0.5);
        g.mean[0][1] = f64::NAN;
        let err = render_global(&g, &[[0.5; 3]], &cam(4, 4), &RenderSettings::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn early_out_stops_at_min_transmittance() {
        let c = cam(9, 9);
        let means: Vec<Vec3> = (0..6).map(|i| [0.0, 0.0, 0.1 * i as f64]).collect();
        let g = splats(&means, 0.05, 1.0);
        let out = render_global(&g, &[[0.0; 3]; 6], &c, &RenderSettings::default()).unwrap();
        let s = out.state.as_ref().unwrap();
        let p = 4 * 9 + 4;
        // 0.01² = 1e-4 is not below the threshold, 0.01³ is
        assert_eq!(s.offsets[p + 1] - s.offsets[p], 2);
        assert!(s.final_t[p] >= MIN_TRANSMITTANCE);
        assert!(out.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
