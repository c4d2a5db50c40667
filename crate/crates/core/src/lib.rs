//! Generalized category discovery over multi-view feature triples: gated
//! residual fusion, multi-level k-means voting, consistency-weighted
//! contrastive learning and prototype distillation.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod linalg;
pub mod losses;
pub mod memory;
pub mod scalar;
pub mod trainer;
pub mod voting;

pub use config::{ConfigError, RunConfig};
pub use eval::{acc_metrics, estimate_k, evaluate, hungarian, EvalReport, EvalSpace};
pub use features::{generate_synthetic, load_dataset, save_dataset, Dataset, FeatureRecord, SyntheticConfig};
pub use fusion::{fuse, FusionConfig, GateParams};
pub use linalg::Mat;
pub use scalar::Scalar;
pub use trainer::model::{ModelDims, ModelParams};
pub use trainer::{train_two_stage, TrainConfig, TrainOutcome};
pub use voting::{VoteConfig, VoteTable};

pub type MatF32 = Mat<f32>;
pub type MatF64 = Mat<f64>;
pub type ModelParamsF32 = ModelParams<f32>;
pub type ModelParamsF64 = ModelParams<f64>;
pub type VoteTableF32 = VoteTable<f32>;
pub type VoteTableF64 = VoteTable<f64>;
