use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;

/// Trainable tensor with a gradient accumulator of the same shape.
/// Backward passes add into `grad`; `zero_grad` resets it before each batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Parameter {
    pub value: Matrix,
    #[serde(skip, default = "default_grad")]
    pub grad: Matrix,
}

fn default_grad() -> Matrix {
    Matrix::zeros(1, 1)
}

impl Parameter {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Parameter {
            value: Matrix::zeros(rows, cols),
            grad: Matrix::zeros(rows, cols),
        }
    }

    pub fn from_matrix(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Parameter { value, grad }
    }

    /// Uniform init in [-limit, limit].
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Parameter::from_matrix(Matrix::from_vec(rows, cols, data))
    }

    /// Xavier/Glorot uniform init for a (fan_in, fan_out) weight.
    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Parameter::uniform(rows, cols, limit, rng)
    }

    pub fn zero_grad(&mut self) {
        self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
    }

    /// Restores the grad accumulator after deserialization.
    pub fn ensure_grad_shape(&mut self) {
        if self.grad.shape() != self.value.shape() {
            self.grad = Matrix::zeros(self.value.rows(), self.value.cols());
        }
    }
}

/// Anything that exposes its named parameters for optimization,
/// checkpointing and finite-difference checks. Visit order is fixed.
pub trait Params {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter));
}

impl Params for Parameter {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(prefix, self);
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads(m: &mut impl Params) {
    m.visit("", &mut |_, p| p.zero_grad());
}

pub fn param_names(m: &mut impl Params) -> Vec<String> {
    let mut names = Vec::new();
    m.visit("", &mut |n, _| names.push(n.to_string()));
    names
}

pub fn num_scalars(m: &mut impl Params) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.value.data().len());
    n
}

/// Snapshot of all parameter values, in visit order.
pub fn collect_values(m: &mut impl Params) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p| out.push((n.to_string(), p.value.clone())));
    out
}

/// Snapshot of all gradients, in visit order.
pub fn collect_grads(m: &mut impl Params) -> Vec<(String, Matrix)> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p| out.push((n.to_string(), p.grad.clone())));
    out
}

/// Loads parameter values by name; errors on missing or mismatched entries.
pub fn load_values(m: &mut impl Params, values: &[(String, Matrix)]) -> crate::error::Result<()> {
    use std::collections::BTreeMap;
    let table: BTreeMap<&str, &Matrix> = values.iter().map(|(n, v)| (n.as_str(), v)).collect();
    let mut missing = Vec::new();
    m.visit("", &mut |n, p| match table.get(n) {
        Some(v) if v.shape() == p.value.shape() => {
            p.value = (*v).clone();
            p.zero_grad();
        }
        _ => missing.push(n.to_string()),
    });
    if missing.is_empty() {
        Ok(())
    } else {
        Err(crate::error::Error::Config(format!(
            "checkpoint missing or mismatched parameters: {}",
            missing.join(", ")
        )))
    }
}
