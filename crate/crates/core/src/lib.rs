//! Self-paced sample selection for barely-supervised volumetric
//! segmentation.
//!
//! The crate covers the full pipeline at desk scale: synthetic volumes with
//! one annotated slice per labeled case, a registration surrogate that
//! extrudes the slice into a noisy volumetric pseudo label, a small
//! encoder–decoder trained as an EMA teacher/student pair on a hand-rolled
//! reverse-mode tape, uncertainty-driven self-paced voxel selection, a
//! bidirectional feature contrastive loss, and the usual overlap and surface
//! metrics.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
