//! Forecasting of per-station EV charging availability over a road-network
//! graph: attribute augmentation, graph convolution for spatial structure,
//! a sparse-attention encoder-decoder for temporal structure, and the full
//! ingest / train / evaluate / perturb workflow.
//!
//! The numerical core is generic over the scalar type ([`scalar::Scalar`]):
//! training runs in f32, tests and gradient checks in f64.

pub mod a2unit;
pub mod gcn;
pub mod graph;
pub mod informer;
pub mod ingest;
pub mod metrics;
pub mod nncore;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use nncore::{Graph, NnError, ParameterStore, Tensor, Var};
pub use scalar::Scalar;

/// 32-bit tensor used in training mode.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensor used in tests and gradient checking.
pub type Tensor64 = Tensor<f64>;
/// 32-bit graph used in training mode.
pub type Graph32 = Graph<f32>;
/// 64-bit graph used in tests and gradient checking.
pub type Graph64 = Graph<f64>;
/// 32-bit parameter store used in training mode.
pub type ParameterStore32 = ParameterStore<f32>;
/// 64-bit parameter store used in tests and gradient checking.
pub type ParameterStore64 = ParameterStore<f64>;

/// Every registered differentiable-op gradient check: core tensor ops, the
/// graph-convolution layers, the attention blocks, and the end-to-end micro
/// model. Checks always run in 64-bit.
pub fn gradcheck_registry(seed: u64) -> Vec<nncore::gradcheck::GradCheckCase> {
    let mut cases = nncore::gradcheck::core_cases(seed);
    cases.extend(gcn::gradcheck_cases(seed));
    cases.extend(informer::gradcheck_cases(seed));
    cases.extend(trainer::model::gradcheck_cases(seed));
    cases
}
