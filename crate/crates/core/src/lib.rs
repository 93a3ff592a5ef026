//! Cloud optical thickness retrieval with an angle-coded attention network.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and Adam.
//! - [`scene`]: synthetic COT fields, the two-stream forward law, 3D
//!   perturbations and the `CAACDS1` dataset format.
//! - [`baselines`]: lookup-table IPA inversion and a per-pixel MLP.
//! - [`model`]: the attention network and the `CAACCKPT1` checkpoint format.
//! - [`train`]: multi-angle training, metrics, evaluation and comparison.

pub mod baselines;
pub mod config;
pub mod error;
pub mod model;
pub mod raster;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
