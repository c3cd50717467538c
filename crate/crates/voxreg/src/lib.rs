//! Deformable 3-D registration engine and longitudinal evaluation harness
//! for volumetric (NIfTI) images.
//!
//! The pipeline: optional rigid/affine initialization, a dense deformable
//! stage driven by a local normalized cross-correlation similarity with an
//! L2 displacement-gradient regularizer, and an evaluation layer producing
//! overlap, Jacobian and cohort-level statistics (regression, rank tests)
//! suitable for longitudinal studies. A phantom generator provides
//! synthetic, ground-truthed inputs for end-to-end validation.

pub mod cohort;
pub mod error;
pub mod evaluation;
pub mod math;
pub mod nifti;
pub mod objectives;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod transforms;
pub mod volume;

pub use error::{Error, Result};
