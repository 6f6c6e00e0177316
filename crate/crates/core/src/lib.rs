//! Adversarial robustness workbench: a small reverse-mode autodiff engine,
//! convolutional classifiers, FGSM and Carlini-Wagner L2 attacks, defensive
//! distillation, and the metrics and reports that compare them.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
