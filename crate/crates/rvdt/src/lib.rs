//! Forward-pass reference of a recurrent video denoising transformer: a CNN
//! encoder with windowed spatial transformer blocks, bi-directional temporal
//! transformer recurrence (transmission and merging layers), a
//! channel-spatial attention feed-forward, and a pixel-shuffle decoder.

pub mod attention;
pub mod checks;
pub mod config;
pub mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod weights;
pub mod window;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::{NoiseInput, Rvdt};
pub use tensor::Tensor;
pub use weights::{param_count, WeightSet};
