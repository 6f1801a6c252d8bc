//! Exemplar-conditioned plant counting by local count regression.
//!
//! A plain vision transformer encodes image and exemplar tokens jointly. The
//! exemplar→image attention becomes a match map appended to the image
//! features, and one of several box-size-specific counters regresses the
//! number of objects in overlapping windows. The redundant window counts are
//! normalized back to a token-level count map whose sum is the image count.
//!
//! Everything runs on `f64` tensors with a small tape-based autodiff engine
//! ([`autodiff::Graph`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod counter;
pub mod data;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod normalize;
pub mod optim;
pub mod raster;
pub mod supervision;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use autodiff::{Graph, Var};
pub use checkpoint::{Checkpoint, ParamStore};
pub use config::ModelConfig;
pub use data::{AnnotatedImage, Sample};
pub use counter::{Mode, RedundantCountMap, WindowGeometry};
pub use error::{Error, Result};
pub use geometry::{Branch, BranchThresholds, ExemplarBox, ExemplarSet};
pub use metrics::{compute_metrics, MetricsReport};
pub use model::{Prediction, TasselModel};
pub use normalize::{image_count, normalize, NormalizedCountMap};
pub use raster::Raster;
pub use synth::SynthConfig;
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use visualize::{VisMode, VisualizationMap};
