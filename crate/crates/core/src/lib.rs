//! Masking-based augmentation for one-shot tract segmentation.
//!
//! The crate covers the whole path from data to evaluation:
//!
//! * [`volume`], [`nifti`], [`manifest`]: 3D images, binary tract masks and
//!   their on-disk formats.
//! * [`augment`]: random cutout (RC1/RC2) and tract cutout (TC1/TC2)
//!   generation of synthetic annotated scans.
//! * [`model`]: a small voxelwise segmenter with a shared feature layer and a
//!   per-task head, trained with Adamax.
//! * [`pipeline`]: pretraining, the CFT/IFT/augmented transfer protocols and
//!   the phantom experiment harness.
//! * [`ensemble`], [`metrics`]: majority voting, Dice and the paired t-test.
//! * [`phantom`]: synthetic tube phantoms.

pub mod augment;
pub mod ensemble;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod parallel;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask3D, Geometry, TractChannel, TractLabelMap, Volume3D};
