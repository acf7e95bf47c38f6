//! Federated averaging on non-iid data: local objectives, synthetic
//! federated datasets, device sampling schemes, a deterministic FedAvg
//! engine, the quadratic counterexample and convergence-bound calculators.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`.

pub mod counterexample;
pub mod datasets;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod objectives;
pub mod optim;
pub mod sampling;
pub mod scalar;
pub mod theory;

pub use error::NumericError;
pub use scalar::Scalar;

pub type ParamVector64 = objectives::ParamVector<f64>;
pub type LocalObjective64 = objectives::LocalObjective<f64>;
pub type GlobalObjective64 = objectives::GlobalObjective<f64>;
pub type DeviceData64 = datasets::DeviceData<f64>;
pub type FederatedDataset64 = datasets::FederatedDataset<f64>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Counterexample64 = counterexample::Counterexample<f64>;
pub type RunConfig64 = engine::RunConfig<f64>;
pub type RunResult64 = engine::RunResult<f64>;
