//! Motion clips, observations, windows and normalization.

mod clip;
mod condition;
mod norm;
mod synth;
mod window;

pub use clip::{load_motion_set, write_dataset, Manifest, ManifestEntry, MotionClip, DEFAULT_FPS, MOTION_MAGIC, MOTION_VERSION};
pub use condition::{
    extract_condition, SparseCondition, COND_DIM, COND_MAGIC, COND_VERSION, FEATURES_PER_JOINT, OBSERVED_JOINTS,
};
pub use norm::{fit_normstats, scale_targets, ChannelStats, NormStats, STD_FLOOR};
pub use synth::{
    synth_clip_with_meta, synth_dataset, synth_dataset_with_meta, MotionKind, SynthMeta, MAX_JOINT_ANGLE_DEG,
    SECONDARY_BAND, SECONDARY_DEG,
};
pub use window::{make_windows, window_starts, Window, DEFAULT_HISTORY, DEFAULT_WINDOW};
