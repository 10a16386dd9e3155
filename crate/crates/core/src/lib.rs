//! Occlusion-robust spatial attention for face verification under masks.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]) carries CBAM, complementary attention learning, and
//! multi-focal spatial attention with Newton-iteration orthogonalized
//! weights ([`attention`], [`oni`]); [`model`] assembles them into training
//! variants, [`training`] optimizes them on the synthetic data of [`data`],
//! and [`evaluation`] measures verification accuracy and attention
//! localization.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod oni;
mod ops;
pub mod param;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use ops::norm::{BN_EPSILON, BN_MOMENTUM};
pub use ops::pool::PoolMode;
pub use tensor::{DType, Real, Tensor};
