pub mod augment;
pub mod camera;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod ndiff;
pub mod pose;
pub mod rng;
pub mod synthhand;
pub mod trainer;

pub use error::{Error, Result};
