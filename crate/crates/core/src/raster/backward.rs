use super::render::RenderOutput;
use super::{projection_jacobian, Camera};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use crate::splats::GlobalGrad;

/// Gradients of a render w.r.t. its colors and world-space splats.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterGrad {
    pub colors: Vec<Vec3>,
    pub global: GlobalGrad,
}

/// Backward of a render given `∂L/∂rgb` (channel-planar) and optionally `∂L/∂alpha`.
pub fn render_backward(out: &RenderOutput, grad_rgb: &[f64], grad_alpha: Option<&[f64]>) -> Result<RasterGrad> {
    let st = out.state.as_deref().ok_or(Error::MissingRenderState)?;
    let hw = out.width * out.height;
    if grad_rgb.len() != 3 * hw || grad_alpha.is_some_and(|g| g.len() != hw) {
        return Err(Error::shape("render_backward", "gradient does not match the image size"));
    }
    let g = st.global.len();
    let mut g_color = vec![[0.0; 3]; g];
    let mut g_mean2d = vec![[0.0; 2]; g];
    // ∂L/∂(a, b, c) of the conic [[a, b], [b, c]], b counted once
    let mut g_conic = vec![[0.0; 3]; g];
    let mut g_opacity = vec![0.0; g];
    let bg = st.settings.background;

    let mut trans = Vec::new();
    for y in 0..out.height {
        for x in 0..out.width {
            let p = y * out.width + x;
            let list = &st.contributors[st.offsets[p]..st.offsets[p + 1]];
            if list.is_empty() {
                continue;
            }
            let gp = [grad_rgb[p], grad_rgb[hw + p], grad_rgb[2 * hw + p]];
            let ga = grad_alpha.map_or(0.0, |g| g[p]);
            trans.clear();
            let mut t = 1.0;
            for c in list {
                trans.push(t);
                t *= 1.0 - c.alpha;
            }
            let t_final = st.final_t[p];
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut after = math::scale(bg, t_final);
            for (k, c) in list.iter().enumerate().rev() {
                let i = c.splat as usize;
                let ti = trans[k];
                let col = st.colors[i];
                let w = c.alpha * ti;
                for ch in 0..3 {
                    g_color[i][ch] += gp[ch] * w;
                }
                let one_minus = 1.0 - c.alpha;
                let mut g_alpha = ga * t_final / one_minus;
                for ch in 0..3 {
                    g_alpha += gp[ch] * (ti * col[ch] - after[ch] / one_minus);
                }
                for ch in 0..3 {
                    after[ch] += col[ch] * w;
                }
                if c.clamped {
                    continue;
                }
                let s = st.prepared[i].as_ref().expect("contributors are visible");
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                // α = σ·exp(p), p = −½ dᵀ A d
                let g_pow = g_alpha * c.alpha;
                g_opacity[i] += g_alpha * c.alpha / s.opacity;
                let [a, b, cc] = s.conic;
                g_mean2d[i][0] += g_pow * (a * dx + b * dy);
                g_mean2d[i][1] += g_pow * (b * dx + cc * dy);
                g_conic[i][0] += -0.5 * g_pow * dx * dx;
                g_conic[i][1] += -g_pow * dx * dy;
                g_conic[i][2] += -0.5 * g_pow * dy * dy;
            }
        }
    }

    let mut global = GlobalGrad::zeros(g);
    for i in 0..g {
        let Some(s) = st.prepared[i].as_ref() else { continue };
        let sig = s.opacity;
        global.opacity_logit[i] = g_opacity[i] * sig * (1.0 - sig);
        let (gm, gs, grot) = splat_chain(
            &st.camera,
            st.global.mean[i],
            &st.global.rotation[i],
            st.global.scale[i],
            s.conic,
            g_mean2d[i],
            g_conic[i],
        );
        global.mean[i] = gm;
        global.scale[i] = gs;
        global.rotation[i] = grot;
    }
    Ok(RasterGrad { colors: g_color, global })
}

/// Screen-space gradients of one splat back to `(μ', s', R')`.
fn splat_chain(
    cam: &Camera,
    mean: Vec3,
    rot: &Mat3,
    scale: Vec3,
    conic: [f64; 3],
    g_mean2d: [f64; 2],
    g_conic: [f64; 3],
) -> (Vec3, Vec3, Mat3) {
    let w = &cam.rotation;
    let pc = cam.to_camera(mean);
    let (x, y, z) = (pc[0], pc[1], pc[2]);
    let iz = 1.0 / z;
    let (fx, fy) = (cam.fx, cam.fy);

    // S = A⁻¹ ⇒ ∂L/∂S = −A·G·A with G the symmetric conic gradient
    let a = [[conic[0], conic[1]], [conic[1], conic[2]]];
    let gc = [[g_conic[0], 0.5 * g_conic[1]], [0.5 * g_conic[1], g_conic[2]]];
    let mut g_s = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += a[r][k] * gc[k][l] * a[l][c];
                }
            }
            g_s[r][c] = -acc;
        }
    }

    // S = J·M·Jᵀ + floor, M = W·Σ·Wᵀ
    let mut ms = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            ms[r][c] = rot[r][c] * scale[c];
        }
    }
    let sigma = math::mat_mul(&ms, &math::transpose(&ms));
    let m = math::mat_mul(&math::mat_mul(w, &sigma), &math::transpose(w));
    let j = projection_jacobian(cam, pc);
    let mut jm = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            jm[r][c] = (0..3).map(|k| j[r][k] * m[k][c]).sum();
        }
    }
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_j[r][c] = (0..2).map(|k| (g_s[r][k] + g_s[k][r]) * jm[k][c]).sum();
        }
    }
    let mut g_m = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += j[k][r] * g_s[k][l] * j[l][c];
                }
            }
            g_m[r][c] = acc;
        }
    }
    let g_sigma = math::mat_mul(&math::mat_mul(&math::transpose(w), &g_m), w);
    let g_sym = math::mat_add(&g_sigma, &math::transpose(&g_sigma));
    let g_ms = math::mat_mul(&g_sym, &ms);
    let mut g_rot = [[0.0; 3]; 3];
    let mut g_scale = [0.0; 3];
    for r in 0..3 {
        for c in 0..3 {
            g_rot[r][c] = g_ms[r][c] * scale[c];
            g_scale[c] += g_ms[r][c] * rot[r][c];
        }
    }

    // camera-space point: mean2d and J
    let mut g_pc = [
        g_mean2d[0] * fx * iz,
        g_mean2d[1] * fy * iz,
        -g_mean2d[0] * fx * x * iz * iz - g_mean2d[1] * fy * y * iz * iz,
    ];
    g_pc[0] += g_j[0][2] * (-fx * iz * iz);
    g_pc[1] += g_j[1][2] * (-fy * iz * iz);
    g_pc[2] += g_j[0][0] * (-fx * iz * iz)
        + g_j[0][2] * (2.0 * fx * x * iz * iz * iz)
        + g_j[1][1] * (-fy * iz * iz)
        + g_j[1][2] * (2.0 * fy * y * iz * iz * iz);
    (math::mat_t_vec(w, g_pc), g_scale, g_rot)
}

/// Chains gradients on unit view directions back to the splat means.
pub fn view_dir_backward(means: &[Vec3], cam: &Camera, grad_dirs: &[Vec3]) -> Vec<Vec3> {
    let c = cam.center();
    means
        .iter()
        .zip(grad_dirs)
        .map(|(&m, &g)| math::normalize_backward(math::sub(m, c), g))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_err};
    use crate::raster::{render_global, RenderSettings};
    use crate::splats::GlobalSplats;

    fn cam() -> Camera {
        Camera::look_at([0.0, 0.0, 5.0], [0.0; 3], [0.0, 1.0, 0.0], 0.6, 9, 9)
    }

    #[test]
    fn sole_contributor_color_gradient_is_alpha() {
        let g = GlobalSplats {
            mean: vec![[0.0; 3]],
            rotation: vec![math::IDENTITY3],
            scale: vec![[0.05; 3]],
            opacity: vec![0.7],
        };
        let out = render_global(&g, &[[0.3; 3]], &cam(), &RenderSettings::default()).unwrap();
        let p = 4 * 9 + 4;
        let mut grad = vec![0.0; 3 * 81];
        grad[p] = 1.0;
        let r = render_backward(&out, &grad, None).unwrap();
        assert!((r.colors[0][0] - out.alpha[p]).abs() < 1e-15);
        assert_eq!(r.colors[0][1], 0.0);
    }

    #[test]
    fn occluded_color_gradient_scaled_by_transmittance() {
        let g = GlobalSplats {
            mean: vec![[0.0, 0.0, 0.5], [0.0, 0.0, -0.5]],
            rotation: vec![math::IDENTITY3; 2],
            scale: vec![[0.05; 3]; 2],
            opacity: vec![0.6, 0.5],
        };
        let out = render_global(&g, &[[0.3; 3], [0.9; 3]], &cam(), &RenderSettings::default()).unwrap();
        let st = out.state.as_ref().unwrap();
        let p = 4 * 9 + 4;
        let list = &st.contributors[st.offsets[p]..st.offsets[p + 1]];
        assert_eq!(list[0].splat, 0);
        let mut grad = vec![0.0; 3 * 81];
        grad[p] = 1.0;
        let r = render_backward(&out, &grad, None).unwrap();
        let (a0, a1) = (list[0].alpha, list[1].alpha);
        assert!((r.colors[0][0] - a0).abs() < 1e-15);
        assert!((r.colors[1][0] - a1 * (1.0 - a0)).abs() < 1e-15);
    }

    #[test]
    fn stateless_output_is_rejected() {
        let g = GlobalSplats { mean: vec![], rotation: vec![], scale: vec![], opacity: vec![] };
        let out = render_global(&g, &[], &cam(), &RenderSettings::default()).unwrap().without_state();
        assert!(matches!(render_backward(&out, &[0.0; 243], None), Err(Error::MissingRenderState)));
    }

    #[test]
    fn view_dir_gradient() {
        let c = cam();
        let means = vec![[0.3, -0.2, 0.1], [1.0, 0.5, -0.4]];
        let w = [[0.3, -1.0, 0.2], [0.5, 0.5, -0.7]];
        let f = |flat: &[f64]| {
            let g = GlobalSplats {
                mean: flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
                rotation: vec![math::IDENTITY3; 2],
                scale: vec![[1.0; 3]; 2],
                opacity: vec![0.5; 2],
            };
            crate::raster::view_dirs(&g, &c).iter().zip(&w).map(|(d, w)| math::dot(*d, *w)).sum::<f64>()
        };
        let flat: Vec<f64> = means.iter().flatten().copied().collect();
        let an: Vec<f64> = view_dir_backward(&means, &c, &w).into_iter().flatten().collect();
        assert!(rel_err(&an, &numeric_grad(f, &flat, 1e-6)) < 1e-7);
    }
}
