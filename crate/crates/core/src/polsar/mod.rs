//! PolSAR inputs: coherency features, multi-band cubes, synthetic scenes,
//! chessboard splits, sampling and augmentation.

pub mod chessboard;
pub mod coherency;
pub mod cube;
pub mod sampling;
pub mod synth;

pub use chessboard::{chessboard_partition, ChessboardSplit, Part};
pub use coherency::{coherency_to_vector, CoherencyMatrix};
pub use cube::{LabelRaster, PolSarCube, FEATURES};
pub use sampling::{
    augment, draw_training_samples, extract_patch, Anchor, Augment, SampleBudget, SampleSet,
    DEFAULT_PATCH,
};
pub use synth::{default_signatures, generate_synthetic_scene, SceneConfig, SignatureTable};
