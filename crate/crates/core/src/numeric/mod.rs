//! Numeric foundations: tensors, batched SPD solves, the differentiation
//! tape, deterministic random numbers and finite-difference checking.

pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, Objective};
pub use graph::{ConvGeometry, Gradients, Graph, NormMode, NormStats, Var};
pub use linalg::spd_solve_batch;
pub use params::ParamSet;
pub use rng::Rng;
pub use tensor::Tensor;

/// Draw `n` uniform values in `[0, 1)`, advancing `rng` `n` times.
pub fn rng_uniform(rng: &mut Rng, n: usize) -> Vec<f64> {
    rng.uniform(n)
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.range(-a, a))
}
