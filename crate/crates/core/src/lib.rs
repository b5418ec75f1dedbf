//! Segmentation-to-classification ("reverse transfer") experiments on lung
//! ultrasound B-scans: a small autodiff engine, a U-Net with a pooled
//! diagnosis head, synthetic phantoms, training, metrics and k-fold harness.

pub mod augment;
pub mod dataset;
pub mod harness;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod phantom;
pub mod rng;
pub mod tensor;
pub mod train;

pub use harness::{ExperimentConfig, FoldSpec, Grouping, PretrainSource, Task};
pub use labels::{GreyImage, LabelMap, LabelSchema};
pub use metrics::{ClsReport, FoldAggregate, IouScores, SegConfusion};
pub use model::{ClassifierConfig, ModelWeights, UNetConfig};
pub use phantom::{DatasetSpec, Diagnosis, PhantomParams, Sample};
pub use rng::SplitMix64;
pub use tensor::{Graph, Tensor, Var};
pub use train::{TrainConfig, TrainHistory};

/// Image size `(H, W)` used for full-resolution experiments.
pub const FULL_IMAGE_SIZE: (usize, usize) = (464, 624);
/// Default `(H, W)` for desk-scale runs.
pub const DESK_IMAGE_SIZE: (usize, usize) = (96, 128);
