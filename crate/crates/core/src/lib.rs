pub mod ablation;
pub mod datagen;
mod error;
pub mod evaluator;
pub mod losses;
pub mod networks;
pub mod pixels;
pub mod trainer;
pub mod translator;

pub use error::{Error, Result};
