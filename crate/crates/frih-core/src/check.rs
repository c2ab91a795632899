//! Gradient verification utilities.
//!
//! Central finite differences over arbitrary leaf tensors, evaluated in
//! `f64`. These helpers never touch the reverse-mode path they are used to
//! verify; they only re-run forward evaluations.

use crate::tensor::Tensor;

/// Central finite-difference gradients of `f` w.r.t. every leaf tensor.
///
/// `f` must be a pure function of the leaves. Cost is two forward
/// evaluations per scalar coordinate.
pub fn finite_diff(
    leaves: &[Tensor<f64>],
    step: f64,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grad = Tensor::zeros(leaves[li].shape().to_vec());
        for i in 0..leaves[li].numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += step;
            let fp = f(&plus);
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= step;
            let fm = f(&minus);
            grad.data_mut()[i] = (fp - fm) / (2.0 * step);
        }
        grads.push(grad);
    }
    grads
}

/// Finite differences on a deterministic subset of coordinates per leaf.
///
/// Checks coordinates with a fixed step pattern so large parameter tensors
/// stay affordable. Returns (coordinate index, fd value) pairs per leaf.
pub fn finite_diff_sampled(
    leaves: &[Tensor<f64>],
    step: f64,
    max_per_leaf: usize,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> Vec<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let n = leaves[li].numel();
        let take = n.min(max_per_leaf);
        let stride = n.div_ceil(take);
        let mut pairs = Vec::with_capacity(take);
        for i in (0..n).step_by(stride) {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[i] += step;
            let fp = f(&plus);
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[i] -= step;
            let fm = f(&minus);
            pairs.push((i, (fp - fm) / (2.0 * step)));
        }
        out.push(pairs);
    }
    out
}

/// Relative L2 error between two gradient vectors.
pub fn rel_err_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
