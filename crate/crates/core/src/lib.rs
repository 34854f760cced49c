//! Keypoint-transformer pipeline for 3D pose estimation of two hands and a
//! manipulated object, trained on procedurally generated scenes.

pub mod error;
pub mod frontend;
pub mod harness;
pub mod ktformer;
pub mod metrics;
pub mod objpose;
pub mod posedec;
pub mod synthgen;

pub use error::{KptError, Result};
