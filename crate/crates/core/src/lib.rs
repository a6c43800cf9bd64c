//! Multi-scale RoI aggregation for top-down multi-person keypoint estimation.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! miniature feature-pyramid backbone ([`backbone`]), single- and multi-scale
//! RoIAlign ([`roialign`]), the keypoint and classification heads
//! ([`heads`]), heatmap targets/decoding ([`heatmap`]), OKS evaluation
//! ([`oks`]) and the synthetic-data training harness ([`harness`]).

#![allow(clippy::too_many_arguments, clippy::needless_range_loop, clippy::large_enum_variant)]

pub mod backbone;
pub mod boxes;
pub mod error;
pub mod harness;
pub mod heads;
pub mod heatmap;
pub mod keypoints;
pub mod kv;
pub mod model;
pub mod nn;
pub mod oks;
pub mod par;
pub mod roialign;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Precision, Scalar, Tensor, Var};
