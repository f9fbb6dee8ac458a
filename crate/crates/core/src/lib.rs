//! Masked vision-language transformer built on a small reverse-mode
//! autodiff engine.
//!
//! The crate covers the whole pipeline: tensors and gradients
//! ([`autodiff`]), caption tokenization and masked-language masking
//! ([`text`]), image masking units ([`vision`]), the four-stage pyramid
//! encoder ([`encoder`]), the reconstruction / matching / masked-token heads
//! ([`heads`]), pre-training and fine-tuning ([`train`]), downstream
//! evaluation ([`eval`]) and datasets ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod text;
pub mod vision;

pub use autodiff::{AttentionMask, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Float, Tensor};
