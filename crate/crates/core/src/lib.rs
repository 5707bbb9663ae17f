//! Core of a prostate MRI virtual-biopsy pipeline.
//!
//! Volumes are resampled, cropped around the gland and normalised ([`imaging`]); synthetic
//! phantoms stand in for clinical data ([`phantom`]); a compact 3D U-Net delineates the gland and
//! its zones ([`segmenter`]); two classifier families estimate risk ([`classifier`]); a VAE-GAN
//! drives latent counterfactual explanations ([`counterfactual`]); and [`metrics`] and [`trial`]
//! cover evaluation and the reader-study harness.

pub mod classifier;
pub mod counterfactual;
pub mod error;
pub mod imaging;
pub mod nifti;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod segmenter;
pub mod trial;

pub use error::{Error, Result};
