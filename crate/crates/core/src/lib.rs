//! Diagnosis-first multi-rater label fusion and Take-and-Give segmentation.
//!
//! Pipeline: [`synthgen`] produces multi-rater data, [`diagnet`] trains a
//! frozen classifier, [`dfgt`] optimizes per-pixel rater expertness against
//! it, [`tgseg`] learns to segment from the fused labels, and [`eval`] scores
//! everything.

pub mod config;
pub mod data;
pub mod dfgt;
pub mod diagnet;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod resample;
pub mod synthgen;
pub mod tgseg;

pub use config::RunConfig;
pub use data::{
    Dataset, ExpertnessMap, FusedLabel, MultiRaterSample, Provenance, Split, TrainHistory,
};
pub use dfgt::{DFGTDataset, DFGTHyper, Method};
pub use diagnet::{DiagConfig, DiagHyper, DiagnosisNet};
pub use error::{Error, Result};
pub use eval::EvalConfig;
pub use fusion::ExpertnessLogits;
pub use synthgen::SynthSpec;
pub use tgseg::{SegConfig, SegHyper, TGSegNet};
