pub mod gridworld;
pub mod scalar;
pub mod encoding;
pub mod policy;
pub mod conformal;
pub mod model;
pub mod training;
pub mod evaluation;

pub type Mlp64 = policy::Mlp<f64>;
pub type Mlp32 = policy::Mlp<f32>;
pub type Dataset64 = encoding::Dataset<f64>;
pub type Dataset32 = encoding::Dataset<f32>;
pub type Threshold64 = conformal::Threshold<f64>;
pub type Threshold32 = conformal::Threshold<f32>;
pub type Checkpoint64 = policy::Checkpoint<f64>;
pub type TrainState64 = training::TrainState<f64>;
