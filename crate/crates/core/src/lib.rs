//! Physics-conditioned brain MR segmentation toolkit.
//!
//! Quantitative tissue maps are turned into MPRAGE/SPGR contrasts with
//! static signal equations, labelled with a per-tissue Gaussian mixture,
//! and segmented by a small voxelwise network conditioned on the
//! acquisition parameters. The crate also covers Monte-Carlo volumetric
//! uncertainty with calibrated error bounds and ComBat-style multi-site
//! harmonisation with the accompanying statistics.

pub mod analysis;
pub mod error;
pub mod harmonize;
pub mod metrics;
pub mod model;
pub mod pgs;
pub mod phantom;
pub mod seed;
pub mod simulate;
pub mod svg;
pub mod uncertainty;
pub mod volumes;

pub use error::{Error, Result};
pub use simulate::{ParamRange, SequenceKind, SequenceParams};
pub use volumes::{Grid3, HardSegmentation, MpmVolume, SoftSegmentation, Tissue};
