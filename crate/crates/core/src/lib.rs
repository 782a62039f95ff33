//! Quantization-aware training with transition-rate scheduling.
//!
//! Latent weights of quantized layers are updated with a transition-adaptive
//! learning rate (TALR) chosen by a per-layer feedback controller so that the
//! fraction of quantized weights changing level per step follows a target
//! schedule.

pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod quant;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use harness::{RunMetrics, RunStatus, StepRow, TrainConfig};
pub use quant::{QuantRole, QuantizedParam, QuantizerSpec};
pub use schedule::{Schedule, TrController, UpdateRule};
pub use tensor::Tensor;
