//! The lifting network: input embedding, a stack of dual-stream blocks,
//! motion-semantic projection and the 3D regression head.

pub mod checkpoint;
mod config;
mod forward;
pub mod layers;
mod params;

pub use config::{CompositionMode, ModelConfig, Variant};
pub use forward::{Model, Trace};
pub use params::{block_stages, Bound, ParameterStore, Stage};
