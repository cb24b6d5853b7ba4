//! Curvature-guided, uncertainty-aware neural implicit surface reconstruction
//! from depth images.
//!
//! The pipeline: depth frames are fused into a voxel grid that stores a signed
//! distance, its gradient, an accumulated weight and surface curvature per
//! voxel ([`grid`]); frames without poses are tracked against the grid
//! ([`tracking`]); training samples are interpolated from single voxels and
//! stratified by curvature ([`sampler`]); a dual-head network learns distance
//! and uncertainty ([`field`]); marching cubes masked by uncertainty produces
//! open or closed meshes ([`extract`]), scored with [`metrics`].
//!
//! Signed distances are positive inside the surface throughout.

pub mod camera;
pub mod config;
pub mod diffgeo;
pub mod error;
pub mod extract;
pub mod field;
pub mod grid;
pub mod ingest;
pub mod mc_tables;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod sampler;
pub mod tracking;

pub use nalgebra;

pub use camera::{Intrinsics, Pose};
pub use error::{Error, Result};
pub use extract::{evaluate_field, marching_cubes_uncertain, ImplicitField, ScalarField};
pub use field::{init_network, loss_and_grads, train, LossMode, LossReport, LossWeights, NeuralField, TrainConfig};
pub use grid::{Association, IntegrationParams, Voxel, VoxelGrid, VoxelSource};
pub use ingest::DepthFrame;
pub use mesh::UncertainMesh;
pub use render::Shape;
pub use sampler::{interpolate_sample, stratified_batch, Stratum, TrainingSample};
pub use tracking::{estimate_pose, TrackingParams};
