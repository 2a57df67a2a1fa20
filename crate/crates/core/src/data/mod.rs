//! Pose sequence files, the synthetic motion generator and batching.

mod batch;
mod sequence;
mod synth;

pub use batch::{make_batches, root_centered, Batch, BatchOptions, WindowRef};
pub use sequence::{
    load_dataset, load_manifest, load_sequence, parse_sequence, save_sequence, sequence_to_json, ManifestEntry,
    Pose2DSequence, Pose3DSequence, PoseKind, Sequence, SequencePair,
};
pub use synth::{
    forward_kinematics, generate_synthetic_sequence, horizontal_flip, pinhole_project, Camera, JointMotion,
    RootTrajectory, SyntheticSceneConfig,
};
