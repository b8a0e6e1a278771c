//! Numerical core: dense tensors, reverse-mode differentiation, the Adam
//! optimizer, and finite-difference gradient checking.

pub mod autodiff;
pub mod gradcheck;
pub mod optim;
pub mod tensor;

pub use autodiff::{Graph, NnError, Var};
pub use optim::{
    xavier_uniform, AdamConfig, BoundParams, CheckpointError, ParamKind, ParameterStore,
};
pub use tensor::Tensor;
