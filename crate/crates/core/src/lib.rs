//! Foreground/background cross-modal attention for person re-identification.

pub mod ablation;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod crossmodal;
pub mod diffpool;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod image;
pub mod losses;
pub mod model;
mod nn;
pub mod synthdata;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
