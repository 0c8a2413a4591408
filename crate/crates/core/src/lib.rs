pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod forecaster;
pub mod graph;
pub mod jpb;
pub mod layers;
pub mod params;
pub mod revin;
pub mod synthetic;
pub mod tensor;
pub mod training;
pub mod utcae;

pub use error::{Error, Result};
pub use forecaster::{Architecture, Model, ModelConfig, ModelMeta};
pub use graph::{Graph, NodeId};
pub use layers::Mode;
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
