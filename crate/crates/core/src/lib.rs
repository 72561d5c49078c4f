//! Multi-phase volumetric segmentation with a dual-path encoder-decoder.
//!
//! Two U-shaped paths, one per contrast phase, exchange features through
//! hyper-connections between same-resolution slots. Training combines
//! voxel-wise cross-entropy with a negative Pearson correlation between the
//! branches' late feature maps, and optionally augments with virtual phase
//! pairs. The [`harness`] module runs cross-validated experiments on seeded
//! synthetic dual-phase phantoms.

pub mod augment;
pub mod dataio;
pub mod error;
pub mod harness;
pub mod hyperpair;
pub mod losses;
pub mod netblocks;
pub mod tensor;

pub use error::{Error, Result};
