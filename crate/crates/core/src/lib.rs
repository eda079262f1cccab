//! Parallel easy-first text recognition.
//!
//! A convolutional + transformer backbone encodes a text image into a
//! feature grid. The parallel decoder predicts all character positions at
//! once and refines them over K easy-first iterations, committing the most
//! confident positions first. An autoregressive teacher sharing the
//! backbone is trained alongside it and supplies per-position FFN targets
//! for a mimicking loss; it is not needed at inference.
//!
//! ```
//! use easyfirst_core::easyfirst::{decode, DecodeOptions};
//! use easyfirst_core::stub::OraclePredictor;
//!
//! let mut oracle = OraclePredictor::new(&["cat"], 8).unwrap();
//! let out = decode(&mut oracle, DecodeOptions::new(8, 2)).unwrap();
//! assert_eq!(out.text, "cat");
//! ```

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod easyfirst;
mod error;
pub mod harness;
pub mod model;
pub mod params;
pub mod stub;
pub mod teacher;
pub mod training;
pub mod transformer;
pub mod vocab;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{ParamStore, Session};
