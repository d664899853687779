//! Heterogeneous federated learning with full-weight aggregation.
//!
//! Devices train models of different architectures. Each round the server
//! averages same-architecture uploads, transfers each average into a proxy
//! model of one shared architecture through learned layer/channel matching,
//! merges the proxies weighted by how faithfully they reproduce their source's
//! logits, and transfers the merged proxy back into every device architecture.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`); the aliases at
//! the crate root name the concrete instantiations used by the runner and by
//! the double-precision verification tests.

pub mod data;
pub mod error;
pub mod fidelity;
pub mod model;
pub mod orchestrator;
pub mod prom;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision device model (experiments).
pub type DeviceModel32 = model::DeviceModel<f32>;
/// Double-precision device model (gradient verification).
pub type DeviceModel64 = model::DeviceModel<f64>;
/// Single-precision transfer meta networks.
pub type MetaNetworkPair32 = wire::MetaNetworkPair<f32>;
/// Double-precision transfer meta networks.
pub type MetaNetworkPair64 = wire::MetaNetworkPair<f64>;
/// Single-precision proxy model.
pub type ProxyModel32 = prom::ProxyModel<f32>;
