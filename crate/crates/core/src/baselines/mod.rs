//! Reference retrievals: per-pixel lookup-table inversion of the two-stream
//! law, and a context-blind per-pixel MLP.

mod lut;
mod mlp;

pub use lut::{retrieve_ipa, IpaLut, Retrieval};
pub use mlp::{MlpConfig, PixelMlp};
