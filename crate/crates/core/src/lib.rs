//! LV quantification pipeline: phantom data, preprocessing, augmentation,
//! models, training, evaluation and ensembling.

pub mod augment;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod image;
pub mod indices;
pub mod model;
pub mod phantom;
pub mod train;

pub use error::{Error, Result};
