//! Desk-scale text-guided weather-invariant cross-view geo-localization:
//! toy drone/satellite data, parametric weather synthesis, staged caption
//! generation, gated multimodal fusion, a four-part training objective with
//! exact gradients, and per-condition retrieval evaluation.

pub mod autodiff;
pub mod captions;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod imagetensor;
pub mod model;
pub mod pipeline;
pub mod objectives;
pub mod trainer;
pub mod weather;

pub use error::{CvError, Result};
