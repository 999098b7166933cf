//! Differentiable hand-image toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, the `Real` scalar abstraction, and
//!   the `HKT1` binary tensor format.
//! - [`graph`]: a minimal reverse-mode automatic differentiation engine.
//!   Every differentiable quantity in the crate is built on it.
//! - [`hand`]: a parametric hand mesh (blendshapes + linear blend skinning)
//!   with a procedural toy model so tests require no external model data.
//! - [`camera`]: pinhole projection with focal length as the only unknown
//!   intrinsic.
//! - [`encodings`]: keypoint heat-maps, part orientation fields, and their
//!   differentiable decoders.
//! - [`render`]: a differentiable soft silhouette rasterizer plus a hard
//!   coverage oracle.
//! - [`loss`]: backbone / regressor / self-supervised consistency objectives.
//! - [`fit`]: Adam-based recovery of hand, rigid-pose, and focal parameters
//!   from 2D observations.
//! - [`net`]: the cascaded multi-task backbone with task-attention fusion.
//! - [`metrics`]: PCK curves, AUC, mIoU, per-vertex error.
//! - [`dataset`] / [`workbench`]: synthetic dataset generation and the CLI
//!   entry points.

pub mod camera;
pub mod config;
pub mod dataset;
pub mod encodings;
pub mod fit;
pub mod graph;
pub mod hand;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod render;
pub mod tensor;
pub mod workbench;

mod error;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
