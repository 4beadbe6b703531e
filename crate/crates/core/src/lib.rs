//! Crowd density estimation toolkit.
//!
//! - `density`: point annotations -> Gaussian density maps, scale bands,
//!   count-preserving resampling.
//! - `scale`: head-scale estimation (SLIC superpixels + seeded watershed
//!   fused by an MRF) and the constant / kNN baselines.
//! - `network`: multi-branch scale fusion network on a small hand-rolled
//!   f64 autograd tape.
//! - `training`: loss assembly, Adam, the train loop, evaluation,
//!   gradient checking, and the ablation harness.
//! - `scene`: deterministic synthetic scene generator.
//! - `io`: on-disk formats (annotations, density rasters, sigma files,
//!   manifests, history, ablation tables).

pub mod density;
pub mod error;
pub mod imgbuf;
pub mod io;
pub mod network;
pub mod scale;
pub mod scene;
pub mod training;

pub use density::{AnnotationSet, DensityMap, PointAnnotation, ScaleBandPartition};
pub use error::{CrowdError, Result};
pub use network::{Network, NetworkConfig, Topology};
pub use scale::{SigmaAssignment, SigmaMethod};
pub use scene::{generate_synthetic_scene, SyntheticSceneSpec};
