//! Central finite-difference gradient oracle. Everything with a hand-derived
//! backward pass is validated against this.

use super::matrix::Matrix;
use super::param::{collect_grads, Params};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// |a - b| / max(1e-8, |a| + |b|)
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-8, a.abs() + b.abs())
}

struct ParamMeta {
    name: String,
    rows: usize,
    cols: usize,
}

fn metas(m: &mut impl Params) -> Vec<ParamMeta> {
    let mut out = Vec::new();
    m.visit("", &mut |n, p| {
        out.push(ParamMeta {
            name: n.to_string(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
    });
    out
}

fn set_entry(m: &mut impl Params, idx: usize, elem: usize, v: f64) {
    let mut i = 0;
    m.visit("", &mut |_, p| {
        if i == idx {
            p.value.data_mut()[elem] = v;
        }
        i += 1;
    });
}

fn get_entry(m: &mut impl Params, idx: usize, elem: usize) -> f64 {
    let mut i = 0;
    let mut out = 0.0;
    m.visit("", &mut |_, p| {
        if i == idx {
            out = p.value.data()[elem];
        }
        i += 1;
    });
    out
}

/// Central differences with step h = 1e-5 on every parameter entry.
/// `f` must be deterministic given the current parameter values.
pub fn finite_difference_grad<M: Params>(
    m: &mut M,
    mut f: impl FnMut(&mut M) -> f64,
) -> Vec<(String, Matrix)> {
    let metas = metas(m);
    let mut out = Vec::with_capacity(metas.len());
    for (idx, meta) in metas.iter().enumerate() {
        let mut grad = Matrix::zeros(meta.rows, meta.cols);
        for elem in 0..meta.rows * meta.cols {
            let orig = get_entry(m, idx, elem);
            set_entry(m, idx, elem, orig + FD_STEP);
            let fp = f(m);
            set_entry(m, idx, elem, orig - FD_STEP);
            let fm = f(m);
            set_entry(m, idx, elem, orig);
            grad.data_mut()[elem] = (fp - fm) / (2.0 * FD_STEP);
        }
        out.push((meta.name.clone(), grad));
    }
    out
}

/// Largest per-entry relative error between accumulated analytic grads and the
/// finite-difference estimate of `f`. Analytic grads must already be filled in.
pub fn max_grad_rel_err<M: Params>(m: &mut M, f: impl FnMut(&mut M) -> f64) -> f64 {
    let analytic = collect_grads(m);
    let numeric = finite_difference_grad(m, f);
    let mut worst: f64 = 0.0;
    for ((_, a), (_, n)) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max(rel_err(av, nv));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::param::Parameter;

    struct Scalar {
        w: Parameter,
    }

    impl Params for Scalar {
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
            self.w.visit(prefix, f);
        }
    }

    #[test]
    fn fd_of_square_at_three() {
        let mut s = Scalar {
            w: Parameter::from_matrix(Matrix::row_vector(&[3.0])),
        };
        let g = finite_difference_grad(&mut s, |s| s.w.value.get(0, 0).powi(2));
        assert!((g[0].1.get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let mut s = Scalar {
            w: Parameter::from_matrix(Matrix::row_vector(&[1.5, -2.0])),
        };
        let g = finite_difference_grad(&mut s, |_| 42.0);
        for &v in g[0].1.data() {
            assert!(v.abs() < 1e-9);
        }
    }
}
