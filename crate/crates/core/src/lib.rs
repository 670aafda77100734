//! Spirogram-to-endpoint pipeline: synthetic cohorts, flow-volume preprocessing,
//! a patch transformer with masked attention, GBDT feature fusion, baselines,
//! evaluation metrics and CLS-attention overlays.

pub mod error;
pub mod tensorcore;

pub use error::{Error, Result};
pub mod preproc;
pub mod synthdata;
pub mod labels;
pub mod eval;
pub mod model;
pub mod container;
pub mod dataset;
pub mod baselines;
pub mod fusion;
pub mod interpret;
pub mod pipeline;
pub mod checkpoint;
pub mod cli;
