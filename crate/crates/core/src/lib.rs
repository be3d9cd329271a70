//! Desk-scale microscopic traffic and curb-parking simulator with a
//! two-layer learned controller that clears and releases on-street
//! parking spaces to trade travel time against walking distance.
//!
//! The numeric layers (`tensor`, `nn`) are generic over the scalar type
//! via [`scalar::Scalar`]; concrete `f64` aliases live at the crate root.

pub mod checkpoint;
pub mod control;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod policy;
pub mod runner;
pub mod scalar;
pub mod scenario;
pub mod sim;
pub mod tensor;

pub use scalar::Scalar;

/// Default-precision aliases. All shipped tooling runs at 64-bit.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tensor::Tape<f64>;
pub type ParamSet64 = nn::ParamSet<f64>;
pub type AdamState64 = nn::AdamState<f64>;
pub type QNetwork64 = policy::QNetwork<f64>;
pub type QNetworkPair64 = policy::QNetworkPair<f64>;
