//! Dense tensors, reverse-mode autodiff and the seeded RNG.

mod activation;
mod graph;
pub mod kernels;
pub mod par;
mod rng;
mod tensor;

pub use activation::Activation;
pub use graph::{BatchStats, Gradients, Graph, NormStats, Var};
pub use rng::{derive_seed, Rng, RNG_ALGORITHM};
pub use tensor::Tensor;

use crate::error::Result;

/// Pointwise binary operation tag for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

/// Eager matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant_ref(a), g.constant_ref(b));
    let c = g.matmul(va, vb)?;
    Ok(g.take(c))
}

/// Eager pointwise op; `b` may be a one-element tensor.
pub fn elementwise(op: Elementwise, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant_ref(a), g.constant_ref(b));
    let c = match op {
        Elementwise::Add => g.add(va, vb)?,
        Elementwise::Sub => g.sub(va, vb)?,
        Elementwise::Mul => g.mul(va, vb)?,
    };
    Ok(g.take(c))
}
