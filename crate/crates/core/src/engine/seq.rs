use serde::{Deserialize, Serialize};

use super::avatar::Avatar;
use super::checkpoint::SeqState;
use super::config::RunConfig;
use super::fit::Backends;
use crate::error::{Error, Result};
use crate::losses::FeatureBackend;
use crate::math::Vec3;
use crate::mesh::{BlendMesh, Region};
use crate::raster::RenderSettings;
use crate::seed::rng_for;
use crate::sequence::{
    motion_amplitude, photo_loss, run_step, schedule_len, vertex_rms, PhotoContext, SeqConfig, SeqSample, SeqStepLog, SeqTrainer,
    SequenceData, SequenceModel,
};

const STREAM_SEQ_INIT: u64 = 20;

/// Re-expresses recorded vertices on `target`, which is `base` or `base` with a subdivided mouth.
pub fn lift_vertices(base: &BlendMesh, target: &BlendMesh, verts: &[Vec3]) -> Result<Vec<Vec3>> {
    if target.vertex_count() == base.vertex_count() {
        return Ok(verts.to_vec());
    }
    let posed = BlendMesh::new(verts.to_vec(), base.faces.clone(), Vec::new(), 0, base.region_tags.clone(), base.lip_vertex_ids.clone())?;
    let lifted = posed.subdivide_region(Region::Teeth)?;
    if lifted.vertex_count() != target.vertex_count() || lifted.faces != target.faces {
        return Err(Error::Invalid("recorded mesh cannot be mapped onto the avatar mesh".into()));
    }
    Ok(lifted.template)
}

/// Copy of `data` with its vertex trajectories on the avatar mesh.
pub fn adapt_sequence(data: &SequenceData, base: &BlendMesh, target: &BlendMesh) -> Result<SequenceData> {
    if data.vertex_count != base.vertex_count() {
        return Err(Error::shape("adapt_sequence", format!("{} recorded vertices for a {}-vertex mesh", data.vertex_count, base.vertex_count())));
    }
    let mut out = data.clone();
    out.vertices.clear();
    for t in 0..data.frames {
        let row: Vec<Vec3> = data.vertex_row(t).chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        out.vertices.extend(lift_vertices(base, target, &row)?.iter().flatten());
    }
    out.vertex_count = target.vertex_count();
    Ok(out)
}

/// Sequence-model dimensions implied by the avatar and the data.
pub fn model_config(cfg: &RunConfig, avatar: &Avatar, feature_dim: usize, wrinkle_width: usize) -> SeqConfig {
    SeqConfig {
        feature_dim,
        lip_dim: 3 * avatar.mesh.lip_vertex_ids.len(),
        wrinkle_dim: wrinkle_width,
        expr_dim: avatar.mesh.expr_dim,
        vertex_count: avatar.mesh.vertex_count(),
        ..cfg.seq.model.clone()
    }
}

impl SeqState {
    pub fn new(config: RunConfig, avatar: Avatar, feature_dim: usize) -> Result<Self> {
        let backends = Backends::new(config.seed);
        let mc = model_config(&config, &avatar, feature_dim, backends.wrinkle.pooled_width());
        let model = SequenceModel::new(mc, &mut rng_for(config.seed, &[STREAM_SEQ_INIT]))?;
        let mut tc = config.seq.train.clone();
        tc.seed = config.seed;
        let trainer = SeqTrainer::new(tc, &model, &avatar.color, &avatar.set);
        Ok(Self { config, avatar, model, trainer })
    }
}

/// Builds training samples from recorded sequences.
pub fn samples(state: &SeqState, base: &BlendMesh, data: &[SequenceData]) -> Result<Vec<SeqSample>> {
    let backends = Backends::new(state.config.seed);
    data.iter()
        .map(|d| {
            let d = adapt_sequence(d, base, &state.avatar.mesh)?;
            SeqSample::from_data(&d, &state.avatar.mesh, &backends.wrinkle, state.config.seq.train.wrinkle_camera)
        })
        .collect()
}

/// Observer hooks for [`train_sequence`].
pub trait SeqObserver {
    fn on_step(&mut self, _state: &SeqState, _log: &SeqStepLog) -> Result<()> {
        Ok(())
    }
}

impl SeqObserver for () {}

/// Runs the schedule from the state's current step up to `until` (capped at its end).
pub fn train_sequence(state: &mut SeqState, samples: &[SeqSample], until: u64, obs: &mut dyn SeqObserver) -> Result<Vec<SeqStepLog>> {
    let backends = Backends::new(state.config.seed);
    let end = schedule_len(&state.trainer.config, samples.len()).min(until);
    let weights = state.config.fit.weights.clone();
    let SeqState { avatar, model, trainer, config } = state;
    let Avatar { mesh, set, color } = avatar;
    let ctx = PhotoContext { mesh, settings: RenderSettings::default(), weights, backend: &backends.perceptual as &dyn FeatureBackend };
    let mut logs = Vec::new();
    while trainer.step < end {
        let log = run_step(model, color, set, &ctx, trainer, samples)?;
        logs.push(log);
        if log.step % config.seq.log_every == 0 || trainer.step == end {
            // the observer sees a consistent snapshot
            let snapshot = SeqState { config: config.clone(), avatar: Avatar { mesh: mesh.clone(), set: set.clone(), color: color.clone() }, model: model.clone(), trainer: trainer.clone() };
            obs.on_step(&snapshot, &log)?;
        }
    }
    Ok(logs)
}

/// Held-out evaluation of the sequence model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeqEval {
    pub vertex_rms: f64,
    pub amplitude: f64,
    pub photo: f64,
}

pub fn evaluate_sequences(state: &SeqState, samples: &[SeqSample], camera: usize) -> Result<SeqEval> {
    let backends = Backends::new(state.config.seed);
    let ctx = PhotoContext {
        mesh: &state.avatar.mesh,
        settings: RenderSettings::default(),
        weights: state.config.fit.weights.clone(),
        backend: &backends.perceptual,
    };
    let mut e = SeqEval::default();
    for s in samples {
        let pred = state.model.predict(&s.features, s.frames)?;
        e.vertex_rms += vertex_rms(&pred.offsets, &s.offsets);
        e.amplitude = e.amplitude.max(motion_amplitude(&s.offsets));
        e.photo += photo_loss(&state.model, &state.avatar.color, &state.avatar.set, &ctx, s, camera)?;
    }
    let n = samples.len().max(1) as f64;
    e.vertex_rms /= n;
    e.photo /= n;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::HeadSpec;

    #[test]
    fn lifting_matches_subdivided_evaluation() {
        let base = HeadSpec { rings: 8, segments: 10, ..HeadSpec::default() }.build();
        let sub = base.subdivide_region(Region::Teeth).unwrap();
        let psi = [0.3, -0.5, 0.8, 0.1, 0.0, -0.2];
        let v = base.evaluate(&psi, None).unwrap();
        let lifted = lift_vertices(&base, &sub, &v).unwrap();
        let direct = sub.evaluate(&psi, None).unwrap();
        for (a, b) in lifted.iter().zip(&direct) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
        assert_eq!(lift_vertices(&base, &base, &v).unwrap(), v);
    }
}
