//! CPU inference engine and architecture analyzer for a real-time
//! street-scene segmentation network: a lightweight dilated backbone with
//! channel attention feeding a pooled multi-scale context module, fused
//! with a shallow spatial-detail branch into per-pixel class logits.

pub mod analysis;
pub mod blocks;
pub mod error;
pub mod graph;
pub mod image;
pub mod kernels;
pub mod network;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use error::{Error, Result};
