//! Two-stage speech-to-embedding projector training on desk-scale toy
//! backbones: a synthetic speech frontend and a small frozen decoder.

pub mod autodiff;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probe;
pub mod projector;
pub mod seed;
pub mod targets;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
