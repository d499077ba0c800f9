//! Visuo-semantic analysis pipeline: RDM construction, searchlight RSA with
//! split-sampled statistics, fractional ridge decoding/encoding, caption
//! dictionary lookup, recurrent-CNN activation extraction, and
//! cross-validated NNLS RDM reweighting.
//!
//! Storage types are generic over the scalar ([`Float`], f32 or f64); all
//! reductions run in f64. The on-disk formats store f32. The concrete
//! aliases below are what the CLI pipeline uses.

pub mod context;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod fracridge;
pub mod nnls;
pub mod rdm;
pub mod scalar;
pub mod searchlight;

pub use context::{Context, Degeneracy};
pub use error::{Error, Result};
pub use scalar::Float;

pub type Rdm32 = rdm::Rdm<f32>;
pub type Rdm64 = rdm::Rdm<f64>;
pub type Utv32 = rdm::Utv<f32>;
pub type Utv64 = rdm::Utv<f64>;
pub type BetaTensor64 = dataset::BetaTensor<f64>;
pub type ConditionResponses64 = dataset::ConditionResponses<f64>;
pub type EmbeddingMatrix64 = dataset::EmbeddingMatrix<f64>;
