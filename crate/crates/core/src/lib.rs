//! Range loss for metric learning on long-tailed data.
//!
//! The numeric kernels ([`geometry`], [`losses`], [`network`]) are generic
//! over [`Scalar`] (`f32`/`f64`). Data generation, training and evaluation
//! run in `f64`; the `*64` aliases below name the concrete types they use.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matrix;
pub mod network;
pub mod scalar;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{CenterPair, EmbeddingBatch, IdentityId, RangeStat};
pub use losses::{LossResult, RangeLossConfig};
pub use matrix::Matrix;
pub use network::{MlpParams, NetworkShape, SgdConfig};
pub use scalar::Scalar;
pub use trainer::{train, LossMode, MetricsRecord, TrainConfig, TrainRun, Trainer};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type EmbeddingBatch64 = EmbeddingBatch<f64>;
pub type EmbeddingBatch32 = EmbeddingBatch<f32>;
pub type LossResult64 = LossResult<f64>;
pub type MlpParams64 = MlpParams<f64>;
pub type MlpParams32 = MlpParams<f32>;
