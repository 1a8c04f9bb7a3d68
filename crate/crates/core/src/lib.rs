//! Statistical downscaling of daily precipitation: bias-corrected spatial
//! disaggregation, occurrence × amount regression models, multi-task sparse
//! structure learning, a small convolutional network, and the evaluation
//! metrics used to compare them.

pub mod bcsd;
pub mod cnn;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod grid;
pub mod linear;
pub mod mssl;
pub mod persist;
pub mod preprocess;

pub use error::{Error, Result};
