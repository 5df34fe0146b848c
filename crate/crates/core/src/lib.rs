//! Multi-frequency PolSAR land-cover classification with band-specific
//! convolutional features, cross-band interaction, graph aggregation over
//! training samples and adaptive weighted fusion.

pub mod error;
pub mod fusion;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod polsar;
pub mod semantic;
pub mod tape;
pub mod tensor;
pub mod topo;
pub mod train;

pub use error::{Error, Result};
pub use optim::AdamState;
pub use tape::{BnMode, Gradients, OpKind, RunningStats, Tape, Var};
pub use tensor::Tensor;
