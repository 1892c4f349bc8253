//! Rotation-equivariant U-Nets for image segmentation.

pub mod checkpoint;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod experiment;
pub mod groups;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
