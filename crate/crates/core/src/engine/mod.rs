//! End-to-end pipeline: synthetic scenes, avatar fitting, sequence training, checkpoints.

mod avatar;
mod checkpoint;
mod config;
mod fit;
mod seq;
mod synth;
mod views;

pub use avatar::{Avatar, Posed};
pub use checkpoint::{load_avatar, load_fit, load_seq, load_truth, save_fit, save_seq, save_truth, Container, SeqState, CKPT_MAGIC, CKPT_VERSION};
pub use config::{CameraRig, DensifySchedule, FitConfig, FitLr, RunConfig, SceneConfig, SeqRunConfig};
pub use fit::{
    band_error, evaluate, fit_avatar, fit_step, fitting_mesh, maybe_densify, write_jsonl, Backends, DensifyLog, EvalReport, FitLog, FitObserver,
    FitState, StepLog,
};
pub use seq::{adapt_sequence, evaluate_sequences, lift_vertices, model_config, samples, train_sequence, SeqEval, SeqObserver};
pub use synth::{
    fit_dt, forehead_faces, DetailBand, list_sequences, record, scene_scripts, synth_scene, truth_avatar, ExprScript, FeatureMap, SceneScripts, SynthReport,
    TruthAvatar, TruthDetail, WRINKLE_MODE,
};
pub use views::{
    frame_name, image_metrics, neutral_pose, orbit, predicted_poses, recorded_poses, render_pose, render_views, ExprSource, FrameMetric, FramePose,
    MetricsReport, NAME_PATTERN,
};
