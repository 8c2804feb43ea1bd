//! Minimal differentiable tensor engine.

pub mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{concat_cols, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamSpec, ParamStore};
pub use tensor::{gemm, Float, Tensor};

/// Gradients of every parameter of `bound`, in store order.
pub fn collect_grads<T: Float>(grads: &mut Gradients<T>, bound: &Bound<'_, T>) -> Vec<Option<Tensor<T>>> {
    bound.vars().iter().map(|v| grads.take(v)).collect()
}
