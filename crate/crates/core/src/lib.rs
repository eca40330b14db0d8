//! Synthetic image-label generation from a procedural scene generator.

pub mod downstream;
pub mod error;
pub mod harness;
pub mod hypercolumn;
pub mod image;
pub mod inversion;
pub mod label_codec;
pub mod label_generator;
pub mod metrics;
pub mod net;
pub mod scene;
pub mod synthesis;

pub use error::{Error, Result};
pub use harness::hoff;
