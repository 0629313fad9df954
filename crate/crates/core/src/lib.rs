//! A full-reference perceptual image metric built on VGG-16.
//!
//! The distance between a reference `x` and a distorted image `y` is
//!
//! ```text
//! f(x, y) = sum_i w_i * || phi_i(x) - phi_i(y) ||_1
//! ```
//!
//! where `phi_1..phi_10` are the last ReLU and the pool output of each of the
//! five VGG-16 conv blocks and `w` is fitted by logistic regression on
//! human 2AFC triplet judgments.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense arrays and the conv / ReLU / max-pool kernels
//! - [`vgg`]: the trunk, its taps, preprocessing and the VGGW weight format
//! - [`metric`]: per-tap L1 distances and the weighted metric
//! - [`heatmap`]: per-pixel metric maps, overlays, pyramid and scramble probes
//! - [`trainer`]: triplet datasets, features and the logistic fit
//! - [`distort`]: distortion pipeline and triplet synthesis
//! - [`eval`]: rank correlations, triplet accuracy and the human ceiling

pub mod distort;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod image;
pub mod metric;
pub mod tensor;
pub mod trainer;
pub mod vgg;

pub use distort::{Distortion, DistortionKind, DistortionSpec, PipelineSpec};
pub use error::{Error, Result};
pub use heatmap::{Heatmap, Rect};
pub use image::RgbImage;
pub use metric::{metric, LayerDistanceVector, MetricWeights, PerceptualMetric, Reduction};
pub use tensor::{ConvParams, Tensor};
pub use trainer::{TrainConfig, TripletFeature, TripletRecord, UnsurePolicy};
pub use vgg::{FeatureSet, VggWeights, TAP_COUNT, TAP_NAMES};
