//! Two-person text-to-motion generation with discrete motion tokens.

pub mod checkpoint;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod mask;
pub mod motion;
pub mod text;
pub mod transformer;
pub mod vq;

pub use error::{Error, Result};
