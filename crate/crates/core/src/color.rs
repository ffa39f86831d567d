//! Expression- and view-dependent splat colors.
//!
//! Each splat's color is `sigmoid(MLP([ψ, z_i, v_i]))` with one `tanh` hidden layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::tensor::{Activation, Bound, Mlp, ParamSet, Tape, Tensor, Var};

pub const COLOR_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ColorModel {
    pub params: ParamSet,
    pub mlp: Mlp,
    pub expr_dim: usize,
    pub latent_dim: usize,
}

/// Which parts of a color evaluation become trainable tape leaves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ColorTrain {
    pub weights: bool,
    pub psi: bool,
    pub latent: bool,
    pub dirs: bool,
}

impl ColorTrain {
    pub const NONE: Self = Self { weights: false, psi: false, latent: false, dirs: false };
    pub const ALL: Self = Self { weights: true, psi: true, latent: true, dirs: true };
}

/// Tape handles of one color evaluation.
#[derive(Clone, Debug)]
pub struct ColorVars {
    pub bound: Bound,
    pub psi: Var,
    pub latent: Var,
    pub dirs: Var,
    pub colors: Var,
}

impl ColorModel {
    pub fn new<R: Rng>(expr_dim: usize, latent_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(
            &mut params,
            "color",
            &[expr_dim + latent_dim + 3, hidden, 3],
            Activation::Tanh,
            Activation::Sigmoid,
            rng,
        );
        Self { params, mlp, expr_dim, latent_dim }
    }

    fn check(&self, psi: usize, latent: usize, dirs: usize) -> Result<usize> {
        let g = dirs / 3;
        if psi != self.expr_dim || !dirs.is_multiple_of(3) || latent != g * self.latent_dim {
            return Err(Error::shape(
                "color_forward",
                format!(
                    "ψ {psi} (want {}), latents {latent} for {g} splats of width {}",
                    self.expr_dim, self.latent_dim
                ),
            ));
        }
        Ok(g)
    }

    /// `G×3` colors on `tape`; `ψ` is `1×E`, latents `G×L`, directions `G×3`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, psi: Var, latent: Var, dirs: Var) -> Result<Var> {
        let g = self.check(tape.value(psi).numel(), tape.value(latent).numel(), tape.value(dirs).numel())?;
        if g == 0 {
            return Ok(tape.constant(Tensor::zeros(&[0, 3])));
        }
        let rows = tape.repeat_rows(psi, g)?;
        let x = tape.concat_cols(&[rows, latent, dirs])?;
        self.mlp.forward(tape, bound, x)
    }

    /// Records a full evaluation on `tape`.
    pub fn record(&self, tape: &mut Tape, psi: &[f64], latent: &[f64], dirs: &[Vec3], train: ColorTrain) -> Result<ColorVars> {
        let g = self.check(psi.len(), latent.len(), dirs.len() * 3)?;
        let bound = if train.weights { self.params.bind(tape) } else { self.params.bind_frozen(tape) };
        let leaf = |tape: &mut Tape, t: Tensor, train: bool| if train { tape.param(t) } else { tape.constant(t) };
        let psi_v = leaf(tape, Tensor::new(vec![1, psi.len()], psi.to_vec())?, train.psi);
        let lat_v = leaf(tape, Tensor::new(vec![g, self.latent_dim], latent.to_vec())?, train.latent);
        let dir_v = leaf(tape, Tensor::new(vec![g, 3], dirs.iter().flatten().copied().collect())?, train.dirs);
        let colors = self.forward(tape, &bound, psi_v, lat_v, dir_v)?;
        Ok(ColorVars { bound, psi: psi_v, latent: lat_v, dirs: dir_v, colors })
    }

    /// Plain evaluation without gradients.
    pub fn colors(&self, psi: &[f64], latent: &[f64], dirs: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let v = self.record(&mut tape, psi, latent, dirs, ColorTrain::NONE)?;
        Ok(tape.value(v.colors).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Zeroes every weight so that all colors become 0.5.
    pub fn zero(&mut self) {
        for l in &self.mlp.layers {
            l.zero(&mut self.params);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_grad, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> ColorModel {
        ColorModel::new(4, 3, 16, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn inputs(seed: u64, g: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec3>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let psi = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let lat = (0..3 * g).map(|_| r.random_range(-1.0..1.0)).collect();
        let dirs = (0..g)
            .map(|_| crate::math::normalize(std::array::from_fn(|_| r.random_range(-1.0..1.0))))
            .collect();
        (psi, lat, dirs)
    }

    #[test]
    fn zero_weights_give_half_gray() {
        let mut m = model(0);
        m.zero();
        let (psi, lat, dirs) = inputs(1, 5);
        assert!(m.colors(&psi, &lat, &dirs).unwrap().iter().flatten().all(|&c| c == 0.5));
    }

    #[test]
    fn identical_inputs_identical_colors_and_locality() {
        let m = model(2);
        let (psi, mut lat, mut dirs) = inputs(3, 4);
        lat.copy_within(0..3, 3);
        dirs[1] = dirs[0];
        let c = m.colors(&psi, &lat, &dirs).unwrap();
        assert_eq!(c[0], c[1]);
        lat[7] += 0.3;
        let c2 = m.colors(&psi, &lat, &dirs).unwrap();
        assert_eq!(c[0], c2[0]);
        assert_eq!(c[1], c2[1]);
        assert_ne!(c[2], c2[2]);
        assert_eq!(c[3], c2[3]);
        assert!(c2.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = model(4);
        let (psi, lat, dirs) = inputs(5, 3);
        assert!(m.colors(&psi[..3], &lat, &dirs).is_err());
        assert!(m.colors(&psi, &lat[..8], &dirs).is_err());
    }

    #[test]
    fn gradients_match_differences() {
        let m = model(6);
        let (psi, lat, dirs) = inputs(7, 5);
        let w: Vec<f64> = (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let loss = |m: &ColorModel, psi: &[f64], lat: &[f64]| {
            m.colors(psi, lat, &dirs).unwrap().iter().flatten().zip(&w).map(|(c, w)| c * w).sum::<f64>()
        };
        let mut tape = Tape::new();
        let v = m.record(&mut tape, &psi, &lat, &dirs, ColorTrain::ALL).unwrap();
        let wt = tape.constant(Tensor::new(vec![5, 3], w.clone()).unwrap());
        let prod = tape.mul(v.colors, wt).unwrap();
        let l = tape.sum(prod);
        tape.backward(l).unwrap();
        let gp = tape.grad(v.psi).unwrap().to_vec();
        assert!(rel_err(&gp, &numeric_grad(|x| loss(&m, x, &lat), &psi, 1e-6)) < 1e-6);
        let gz = tape.grad(v.latent).unwrap().to_vec();
        assert!(rel_err(&gz, &numeric_grad(|x| loss(&m, &psi, x), &lat, 1e-6)) < 1e-6);
        let grads = v.bound.grads(&tape);
        for (k, g) in grads.iter().enumerate() {
            let base = m.params.tensors()[k].data().to_vec();
            let num = numeric_grad(
                |x| {
                    let mut mm = m.clone();
                    mm.params.tensors_mut()[k].data_mut().copy_from_slice(x);
                    loss(&mm, &psi, &lat)
                },
                &base,
                1e-6,
            );
            assert!(rel_err(g.as_ref().unwrap(), &num) < 1e-6);
        }
    }
}
