//! Multi-parameter image synthesis: per-input reconstructors, attention-guided
//! fusion of their features, a V-shaped generator, adversarial training, and
//! paired image-quality metrics. Everything runs on the small reverse-mode
//! engine in [`autodiff`].

pub mod arch;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod errviz;
pub mod gradsuite;
pub mod metrics;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
