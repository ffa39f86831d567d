use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Multi-scale feature extractor used by the perceptual losses.
pub trait FeatureBackend {
    /// Feature maps (`C×H×W` each) of a `3×H×W` image, coarsest last.
    fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>>;
}

/// Two fixed random 3×3 conv layers with `tanh`, the second after 2× pooling.
#[derive(Clone, Debug)]
pub struct ToyConvBackend {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub const TOY_CHANNELS: usize = 8;

impl ToyConvBackend {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| d.sample(&mut rng)).collect()
        };
        let c = TOY_CHANNELS;
        let w1 = Tensor::new(vec![c, 3, 3, 3], draw(c * 27, 27)).expect("shape");
        let b1 = Tensor::new(vec![c], draw(c, 4)).expect("shape");
        let w2 = Tensor::new(vec![c, c, 3, 3], draw(c * c * 9, c * 9)).expect("shape");
        let b2 = Tensor::new(vec![c], draw(c, 4)).expect("shape");
        Self { w1, b1, w2, b2 }
    }
}

impl FeatureBackend for ToyConvBackend {
    fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>> {
        let x = tape.add_const(img, -0.5);
        let w1 = tape.constant(self.w1.clone());
        let b1 = tape.constant(self.b1.clone());
        let f1 = tape.conv2d(x, w1, Some(b1), 1)?;
        let f1 = tape.tanh(f1);
        let p = tape.avg_pool2(f1)?;
        let w2 = tape.constant(self.w2.clone());
        let b2 = tape.constant(self.b2.clone());
        let f2 = tape.conv2d(p, w2, Some(b2), 1)?;
        let f2 = tape.tanh(f2);
        Ok(vec![f1, f2])
    }
}

/// Per-channel central-difference gradient magnitude at full and half resolution.
#[derive(Clone, Debug)]
pub struct WrinkleBackend {
    pub eps: f64,
    pub levels: usize,
}

impl Default for WrinkleBackend {
    fn default() -> Self {
        Self { eps: 1e-6, levels: 2 }
    }
}

impl WrinkleBackend {
    fn kernels() -> (Tensor, Tensor) {
        let mut gx = vec![0.0; 3 * 3 * 9];
        let mut gy = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            let base = (c * 3 + c) * 9;
            gx[base + 3] = -0.5;
            gx[base + 5] = 0.5;
            gy[base + 1] = -0.5;
            gy[base + 7] = 0.5;
        }
        (
            Tensor::new(vec![3, 3, 3, 3], gx).expect("shape"),
            Tensor::new(vec![3, 3, 3, 3], gy).expect("shape"),
        )
    }

    fn magnitude(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        let (kx, ky) = Self::kernels();
        let kx = tape.constant(kx);
        let ky = tape.constant(ky);
        let gx = tape.conv2d(img, kx, None, 0)?;
        let gy = tape.conv2d(img, ky, None, 0)?;
        let gx = tape.square(gx);
        let gy = tape.square(gy);
        let m = tape.add(gx, gy)?;
        let m = tape.add_const(m, self.eps);
        Ok(tape.sqrt(m))
    }

    /// Spatial mean of every channel at every level, one row per image.
    pub fn pooled(&self, img: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, h, w], img.to_vec())?);
        let feats = self.features(&mut tape, x)?;
        let mut out = Vec::with_capacity(3 * feats.len());
        for f in feats {
            let v = tape.value(f);
            let plane = v.numel() / 3;
            for c in 0..3 {
                out.push(v.data()[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64);
            }
        }
        Ok(out)
    }

    pub fn pooled_width(&self) -> usize {
        3 * self.levels
    }
}

impl FeatureBackend for WrinkleBackend {
    fn features(&self, tape: &mut Tape, img: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.levels);
        let mut x = img;
        for level in 0..self.levels {
            if level > 0 {
                x = tape.avg_pool2(x)?;
            }
            out.push(self.magnitude(tape, x)?);
        }
        Ok(out)
    }
}
