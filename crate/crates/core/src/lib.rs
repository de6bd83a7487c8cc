//! Deterministic single-process simulator of federated class-incremental
//! learning with data-free generative replay.
//!
//! Clients train a shared classifier over a stream of disjoint class tasks.
//! At each task boundary the server inverts the frozen global model into a
//! generative model (no data leaves the clients), and from the next task on,
//! clients rehearse on synthetic samples to reduce catastrophic forgetting.
//!
//! The numeric engine is generic over the scalar type; the simulator runs in
//! double precision through the `*64` aliases below.

pub mod check;
pub mod error;
pub mod scalar;
pub mod tensor;
pub mod layers;
pub mod net;
pub mod optim;
pub mod fd;
pub mod rng;

pub use scalar::Scalar;

/// Double-precision aliases the simulation layers are written against.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Layer64 = layers::Layer<f64>;
pub type Trace64 = net::Trace<f64>;
pub type GradSet64 = net::GradSet<f64>;
pub type Optimizer64 = optim::Optimizer<f64>;
