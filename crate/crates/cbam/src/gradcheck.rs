//! Central-difference gradient oracle.
//!
//! [`finite_diff_grad`] never touches the tape's backward pass; it only
//! re-evaluates a scalar-valued forward function under elementwise
//! perturbations. That independence is what makes it usable as the reference
//! side of every gradient audit.

use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` per element.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, eps: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    assert!(eps > 0.0, "finite_diff_grad: eps must be positive");
    let base = x.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus).expect("same shape"));
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus).expect("same shape"));
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::from_vec(x.shape().to_vec(), grad).expect("same shape")
}

/// Relative disagreement of two gradient vectors:
/// `max|a - b| / max(max|a|, max|b|, 1e-8)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error: shape mismatch");
    let norm = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.max_abs_diff(b);
    diff / norm(a).max(norm(b)).max(1e-8)
}
