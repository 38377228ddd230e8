//! Tangent transformers: first-order Taylor expansions of a transformer
//! classifier around frozen weights, evaluated in a single dual-stream
//! forward pass and trained as a convex problem in the weight deltas.

pub mod compose;
pub mod data;
pub mod error;
#[cfg(not(target_arch = "wasm32"))]
pub mod io;
pub mod layers;
pub mod model;
pub mod oracle;
pub mod params;
pub mod privacy;
pub mod rng;
pub mod serde_float;
pub mod tensor;
pub mod training;

pub use data::{Dataset, Sample};
pub use error::{Error, Result, TensorError};
pub use layers::DualValue;
pub use model::{BaseWeights, ModelConfig, PredictionMode, TangentModel, TangentWeights};
pub use params::{ParamVector, TensorSet};
pub use rng::RngState;
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainReport};
