//! Learnable layers and losses built on the tape.

pub mod lfe;
pub mod loss;
pub mod sff;

pub use lfe::{lfe_forward, FrequencyMode, LfeParams};
pub use loss::{seg_losses, seg_losses_var, LabelMap, LossConfig, SegLosses};
pub use sff::{sff_forward, SffParams, SpatialProjection};
