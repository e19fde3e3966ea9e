//! Instance segmentation of point clouds through spatial-cube instance
//! categories.
//!
//! Every instance is labeled by the cubes of an `n_s^3` grid around its
//! centroid, and every point is classified into those cubes. Decoding is a
//! score filter plus mask NMS, with no clustering step. The crate ships the
//! synthetic scene generator, target encoding for the flatten and project
//! paradigms, a small point network with explicit backprop, the losses, an Adam
//! trainer, decoders, metrics, and the embed-and-cluster baseline.
//!
//! All numeric code is generic over [`Real`] (`f32` or `f64`); aliases for both
//! are exported at the crate root.

pub mod alloc;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod grid;
pub mod infer;
pub mod loss;
pub mod model;
pub mod scalar;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use grid::{build_targets, CubeGrid, Paradigm, TargetSet};
pub use model::{ForwardOutputs, HeadKind, ModelConfig, ModelParams};
pub use scalar::Real;
pub use scene::{generate_dataset, generate_scene, PointCloud, SceneSpec};

pub type PointCloudF32 = PointCloud<f32>;
pub type PointCloudF64 = PointCloud<f64>;
pub type ModelParamsF32 = ModelParams<f32>;
pub type ModelParamsF64 = ModelParams<f64>;
