//! Dense matrix kernels, parameters with manual gradients, layer primitives
//! and the finite-difference gradient oracle.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod param;

pub use gradcheck::{finite_difference_grad, max_grad_rel_err, rel_err, FD_STEP, REL_TOL};
pub use layers::{Activation, Embedding, LayerNorm, Linear, LAYER_NORM_EPS};
pub use matrix::{log_add, log_sum_exp, row_log_softmax, row_softmax, Matrix};
pub use param::{zero_grads, Parameter, Params};

/// Standard normal sample via Box-Muller (rand's Normal lives in a separate
/// crate; two uniforms per sample keeps the dependency surface flat).
pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
