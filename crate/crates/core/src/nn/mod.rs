//! Encoder, projector, optimizer and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod init;
mod params;
pub mod projector;
pub mod vit;

pub use adam::{AdamConfig, AdamState};
pub use params::{Graph, ParamGrads, ParamId, ParamStore};
pub use projector::{Projector, ProjectorConfig};
pub use vit::{Encoder, EncoderConfig, Readout};
