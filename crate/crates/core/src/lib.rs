//! Cross-view camera pose estimation on procedurally generated scenes.

pub mod rng;
pub mod geometry;
pub mod synthdata;
pub mod tensor;
