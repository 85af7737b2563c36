//! Scalar math shims and small numeric helpers shared across the crate.
//!
//! The shims route through `libm` when the `std` feature is off so the rest of
//! the crate can stay agnostic about the float backend.

use alloc::vec::Vec;

#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.exp()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::exp(x)
    }
}

#[inline]
pub(crate) fn ln(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.ln()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::log(x)
    }
}

#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.sqrt()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::sqrt(x)
    }
}

#[inline]
pub(crate) fn ceil(x: f64) -> f64 {
    #[cfg(feature = "std")]
    {
        x.ceil()
    }
    #[cfg(not(feature = "std"))]
    {
        libm::ceil(x)
    }
}

/// Numerically stable softmax: subtracts the maximum before exponentiating.
///
/// Returns an empty vector for empty input. All outputs are strictly positive
/// and sum to 1 (up to rounding).
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let mut max = xs[0];
    for &x in &xs[1..] {
        if x > max {
            max = x;
        }
    }
    let mut out: Vec<f64> = xs.iter().map(|&x| exp(x - max)).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Euclidean distance between two equal-length vectors.
pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    sqrt(squared_distance(a, b))
}

/// Logistic sigmoid, computed in the numerically stable branch form.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one_and_is_positive() {
        let p = softmax(&[1.0, 2.0, 3.0, -1.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax(&[0.5, -0.25, 2.0]);
        let b = softmax(&[100.5, 99.75, 102.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_handles_large_magnitudes() {
        let p = softmax(&[1000.0, 0.0]);
        assert!(p[0] > 0.999_999);
        assert!(p[1] >= 0.0 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let p = softmax(&[3.0; 5]);
        for &v in &p {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_match_hand_values() {
        assert_eq!(squared_distance(&[0.0, 3.0], &[4.0, 0.0]), 25.0);
        assert!((euclidean_distance(&[0.0, 3.0], &[4.0, 0.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_symmetry() {
        for &x in &[-30.0, -2.0, -0.5, 0.0, 0.5, 2.0, 30.0] {
            let s = sigmoid(x);
            assert!((s + sigmoid(-x) - 1.0).abs() < 1e-12);
            assert!(s > 0.0 && s < 1.0);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
