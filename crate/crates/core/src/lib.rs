//! Distance-preserving adversarial translation from a source embedding
//! space to raw audio waveforms.

pub mod data;
pub mod error;
pub mod eval;
pub mod gan;
pub mod metric;
pub mod nets;
pub mod tensor;

pub use error::{Error, Result};
