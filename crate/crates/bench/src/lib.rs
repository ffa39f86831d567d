//! Shared fixtures for the criterion benches in `benches/`.

use splatrig::engine::{fit_dt, record, scene_scripts, truth_avatar, Avatar, FitState, RunConfig, SeqState, TruthAvatar};
use splatrig::raster::Camera;
use splatrig::sequence::SequenceData;

/// The default 64×64, four-camera scene with a freshly initialized fit.
pub struct Scene {
    pub config: RunConfig,
    pub truth: TruthAvatar,
    pub data: SequenceData,
    pub fit: FitState,
}

impl Scene {
    pub fn new(seed: u64) -> Self {
        let config = RunConfig { seed, ..RunConfig::default() };
        let truth = truth_avatar(&config).expect("truth avatar");
        let scripts = scene_scripts(&config);
        let base = config.scene.head.build();
        let cams = config.scene.cameras.build();
        let sc = &config.scene;
        let data = record(&truth, &base, &scripts.fit, &scripts.features, &cams, sc.fit_frames, fit_dt(&config), sc.feature_rate).expect("recording");
        let fit = FitState::new(config.clone(), &base).expect("fit state");
        Self { config, truth, data, fit }
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.data.cameras[i]
    }

    pub fn truth_avatar(&self) -> &Avatar {
        &self.truth.avatar
    }

    /// Sequence-stage state on top of the truth avatar with the default model sizes.
    pub fn sequence_state(&self) -> SeqState {
        SeqState::new(self.config.clone(), self.truth.avatar.clone(), self.data.features.dim).expect("sequence state")
    }
}
