//! Differentiable simulation of amplitude-modulated continuous-wave
//! time-of-flight capture through a per-pixel microlens amplitude mask, with
//! joint optimization of the mask and a small depth refiner.
//!
//! The pipeline runs light field → masked correlation images → four-bucket
//! phase → depth → refined depth, and every stage after scene rendering can
//! be recorded on a [`tape::Tape`] for reverse-mode gradients.

pub mod adam;
pub mod error;
pub mod formats;
pub mod forward;
pub mod kdtree;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod recon;
pub mod refiner;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use forward::{CorrelationStack, NoiseConfig, ToFConfig};
pub use loss::LossConfig;
pub use mask::{MaskPatch, MaskPattern, MicrolensMask};
pub use metrics::{EvalConfig, MetricsReport};
pub use recon::PointCloud;
pub use refiner::{RefinerConfig, RefinerWeights};
pub use rng::RngState;
pub use scene::{LayeredScene, LightField};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainOutput};
