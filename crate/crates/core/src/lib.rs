//! Occlusion-robust neural rendering of articulated subjects from a single
//! camera: surface-conditioned radiance regression with visibility attention
//! and a completeness loss, plus data simulation, training and evaluation.

pub mod autodiff;
pub mod benchmark;
pub mod error;
pub mod field;
pub mod geometry;
pub mod hashgrid;
pub mod metrics;
pub mod motion;
pub mod occlusion;
pub mod renderer;
pub mod scene_io;
pub mod synthgen;
#[doc(hidden)]
pub mod testutil;
pub mod training;
pub mod visibility;

pub use error::{Error, Result};
