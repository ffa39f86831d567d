//! Feature-sequence → vertex-animation model and its training loops.
//!
//! Audio-rate features are resampled to the frame rate, encoded into lip and
//! wrinkle features, mapped to expressions, and decoded into per-frame vertex
//! offsets by a masked transformer decoder.

mod dataset;
mod model;
mod train;

pub use dataset::{read_array, write_array, ArrayFile, SequenceData, SEQ_MAGIC_EXPR, SEQ_MAGIC_FEAT, SEQ_MAGIC_VERT};
pub use dataset::frame_name;
pub use model::{
    shift_history, Decoder, Encoder, ExpressionEncoder, Expr2Latent, Prediction, SeqConfig, SequenceModel, EXPR_HIDDEN,
};
pub use train::{
    alternating_train, motion_amplitude, phase_at, photo_loss, pretrain_encoders, row_norm_loss, run_step, schedule_len,
    step_a, step_b, vertex_rms, AlternatingLog, PhotoContext, SeqPhase, SeqSample, SeqStepLog, SeqTrainConfig,
    SeqTrainer,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BoolMatrix;

/// Video frame rate used throughout the sequence stage.
pub const FRAME_RATE: f64 = 30.0;

/// `N×D` time-major features sampled at `rate` frames per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub data: Vec<f64>,
    pub frames: usize,
    pub dim: usize,
    pub rate: f64,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, frames: usize, dim: usize, rate: f64) -> Result<Self> {
        let s = Self { data, frames, dim, rate };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.data.len() != self.frames * self.dim {
            return Err(Error::shape(
                "feature_sequence",
                format!("{} values for {}×{}", self.data.len(), self.frames, self.dim),
            ));
        }
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::Invalid(format!("feature rate must be positive, got {}", self.rate)));
        }
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// First `n` frames.
    pub fn truncate(&self, n: usize) -> Self {
        let n = n.min(self.frames);
        Self { data: self.data[..n * self.dim].to_vec(), frames: n, ..self.clone() }
    }
}

/// Linear resampling to `target_rate`; output frame `t` reads source index
/// `t·(N_a−1)/(N_e−1)`, so both endpoints are kept exactly.
pub fn frequency_interpolate(seq: &FeatureSequence, target_rate: f64) -> Result<FeatureSequence> {
    seq.validate()?;
    if seq.frames < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 frames, got {}", seq.frames)));
    }
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(Error::Invalid(format!("target rate must be positive, got {target_rate}")));
    }
    let na = seq.frames;
    let ne = ((na as f64 * target_rate / seq.rate).round() as usize).max(1);
    if ne == na {
        return Ok(FeatureSequence { rate: target_rate, ..seq.clone() });
    }
    let mut data = Vec::with_capacity(ne * seq.dim);
    for t in 0..ne {
        let src = if ne == 1 { 0.0 } else { t as f64 * (na - 1) as f64 / (ne - 1) as f64 };
        let i0 = (src.floor() as usize).min(na - 1);
        let i1 = (i0 + 1).min(na - 1);
        let f = src - i0 as f64;
        let (a, b) = (seq.row(i0), seq.row(i1));
        if f == 0.0 {
            data.extend_from_slice(a);
        } else {
            data.extend(a.iter().zip(b).map(|(x, y)| x + f * (y - x)));
        }
    }
    FeatureSequence::new(data, ne, seq.dim, target_rate)
}

/// Look-ahead and alignment masks; `true` means "may attend".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    /// Query `t` sees keys `0..=t`.
    pub target: BoolMatrix,
    /// Query `t` sees key `t` only.
    pub alignment: BoolMatrix,
}

pub fn build_masks(t: usize) -> MaskPair {
    MaskPair {
        target: BoolMatrix::from_fn(t, t, |i, j| j <= i),
        alignment: BoolMatrix::from_fn(t, t, |i, j| i == j),
    }
}
