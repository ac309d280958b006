//! Architectures, weights and whole-network passes.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod params;
pub mod presets;

pub use checkpoint::{Checkpoint, OptimizerState};
pub use config::{LayerConfig, ModelConfig};
pub use network::{Activations, ForwardCache, Gradients, LossAndGradients, Network};
pub use params::{msra_init, ParamBundle};
pub use presets::{audit_notes, audit_reference_counts, preset, CountAudit, PRESET_NAMES};
