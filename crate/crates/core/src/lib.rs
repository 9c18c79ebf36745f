//! Aortic-valve pathology classification from cine cardiac volumes.
//!
//! The pipeline runs heart localisation ([`heart_extraction`]), depth
//! resampling and z-scoring ([`cine_data`]), a 3-D DenseNet classifier
//! ([`densenet`]) trained with focal loss and Adam ([`training`]), Grad-CAM
//! attention maps ([`gradcam`]) and test-set metrics ([`evaluation`]).
//! [`phantom`] generates labelled synthetic cines with known ground truth.

// `!(x > 0.0)` style checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cine_data;
pub mod cli;
pub mod densenet;
pub mod error;
pub mod evaluation;
pub mod gradcam;
pub mod heart_extraction;
pub mod image;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
