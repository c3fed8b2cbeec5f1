//! Spiking SqueezeNet with structured fire-module pruning and
//! accumulate/multiply-accumulate energy profiling.

pub mod arch;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod lif;
pub mod metrics;
pub mod network;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use arch::{ArchSpec, FireMask, Mode, PruneSchedule};
pub use autodiff::{Gradients, Tape, Var};
pub use error::{Result, SnnError};
pub use lif::LifParams;
pub use network::Network;
pub use tensor::Tensor;
