//! Scalar abstraction over `f32`/`f64` plus the small numeric kernels
//! (softmax, cross-entropy, comparison metrics) shared across the crate.

use ndarray::Array1;

/// Floating-point scalar the library is generic over. Training defaults to
/// `f32`; gradient oracles run at `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn f(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn f(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn f(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Numerically stable softmax.
pub fn softmax<F: Real>(logits: &Array1<F>) -> Array1<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out = logits.mapv(|z| (z - max).exp());
    let sum = out.sum();
    out.mapv_inplace(|e| e / sum);
    out
}

/// Cross-entropy of `softmax(logits)` against a one-hot target with optional
/// label smoothing: the target distribution is `(1-s)·onehot + s/K`.
pub fn cross_entropy<F: Real>(logits: &Array1<F>, target: usize, smoothing: F) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let log_z = logits.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
    let k = F::f(logits.len() as f64);
    let uniform = smoothing / k;
    let mut ce = F::zero();
    for (i, &z) in logits.iter().enumerate() {
        let y = if i == target {
            F::one() - smoothing + uniform
        } else {
            uniform
        };
        if y > F::zero() {
            ce -= y * (z - log_z);
        }
    }
    ce
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax(z) - y`.
pub fn cross_entropy_grad<F: Real>(logits: &Array1<F>, target: usize, smoothing: F) -> Array1<F> {
    let mut g = softmax(logits);
    let k = F::f(logits.len() as f64);
    let uniform = smoothing / k;
    if smoothing > F::zero() {
        g.mapv_inplace(|p| p - uniform);
    }
    g[target] -= F::one() - smoothing;
    g
}

/// One-hot encoding of a token index.
pub fn one_hot<F: Real>(index: usize, dim: usize) -> Array1<F> {
    let mut v = Array1::zeros(dim);
    v[index] = F::one();
    v
}

/// Floor used in relative-error comparisons so that near-zero reference
/// entries are judged on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Worst-case relative error between a candidate and a reference slice,
/// with an absolute floor for tiny reference magnitudes.
pub fn max_rel_err(candidate: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(candidate.len(), reference.len(), "length mismatch");
    candidate
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b).abs() / (b.abs().max(a.abs()) + REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// SplitMix64 finaliser; used to derive disjoint seed namespaces.
pub fn mix_seed(seed: u64, namespace: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(namespace.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
