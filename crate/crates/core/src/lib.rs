//! Bone-age progression GAN workbench.
//!
//! A conditional adversarial autoencoder (encoder `E`, generator `G`,
//! identity discriminator `D_id`, image discriminator `D_img`) extended
//! with an age classifier `D_age`, age-label smoothing and self-attention,
//! plus the data pipeline, trainer and evaluation metrics around it.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use bapgan_autograd::{Scalar, Tensor};
pub use config::{AblationRow, ModelConfig};
pub use error::{Error, Result};
