//! Detector for locally-manipulated face images: a small fully-convolutional
//! network whose final receptive field is capped at 33 pixels, trained with a
//! joint classification–segmentation objective on masks that can be supplied,
//! synthesized from landmarks, or trivially constant.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod maskgen;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
