//! Mean-field deep networks: forward passes, gradient flow, layer kernels,
//! the linear mean-field limit, neuron subsampling and complexity estimates.
//!
//! Networks, gradient flow, kernels and the sampler are generic over the
//! scalar type; the aliases below fix it to `f64`, which is what the
//! experiments use. The linear mean-field solver and the complexity
//! estimators work in `f64` only.

pub mod complexity;
pub mod data;
pub mod error;
pub mod gradflow;
pub mod kernels;
pub mod linear_mf;
pub mod net;
pub mod sampler;
pub mod scalar;
pub mod seed;

pub use error::{NhlError, Result};
pub use net::{init_network, ActivationKind, InitSpec};
pub use scalar::Scalar;

pub type Network = net::NetworkState<f64>;
pub type Data = data::Dataset<f64>;
pub type Delta = gradflow::ParamDelta<f64>;
pub type Gram = kernels::GramMatrix<f64>;
