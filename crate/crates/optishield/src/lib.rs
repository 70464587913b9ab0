//! Privacy-preserving image acquisition with a trainable optical kernel.
//!
//! A box-constrained transmissive mask convolves the scene before it reaches
//! the image sensor, so only the mask's output ever enters the digital
//! domain. The crate simulates that front-end, trains it jointly with digital
//! classifiers under three regimes (plain baseline, adversarial GAP, and the
//! inverse-Siamese contrastive strategy), and quantifies the residual leakage
//! of a frozen mask with white-box attackers and a feature-inversion
//! reconstruction attack.

pub mod attacks;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
mod linalg;
pub mod models;
pub mod nn;
pub mod optics;
pub mod training;

pub use error::{Error, Result};
