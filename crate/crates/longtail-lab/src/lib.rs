//! A desk-scale laboratory for long-tail classification heads.
//!
//! The pipeline: generate a synthetic detection-like dataset whose class
//! frequencies follow a power law ([`synthdata`]), train a linear classifier
//! head over the frozen features ([`train`]), and measure how badly the tail
//! loses — and how much a group-wise softmax with its per-group "others"
//! calibration recovers ([`inference`], [`metrics`]).
//!
//! Entry points for common workflows live in the `examples/` directory; the
//! `longtail-lab` binary exposes the same flows as subcommands for scripted
//! runs.

pub mod catalog;
pub mod cli;
pub mod error;
mod gauss;
pub mod head;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod synthdata;
pub mod train;

pub use catalog::{bin_of, default_boundaries, Boundary, ClassCatalog, GroupPartition};
pub use error::{Error, Result};
pub use head::{HeadLayout, HeadParams, WeightNorms};
pub use inference::{BagsPredictor, PlainSoftmaxPredictor, Predictor, ScoreVector};
pub use metrics::MetricsReport;
pub use synthdata::{Dataset, SynthConfig};
pub use train::{Method, TrainConfig};
