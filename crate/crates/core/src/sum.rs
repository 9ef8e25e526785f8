//! Fixed-order summation.
//!
//! Every reduction in the crate goes through these helpers so that results are
//! bit-identical across runs and thread counts: the tree shape depends only on
//! the slice length.

const LEAF: usize = 8;

/// Pairwise (tree) sum with a fixed split at `len / 2`.
pub fn pairwise(xs: &[f64]) -> f64 {
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise(&xs[..mid]) + pairwise(&xs[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n`, without allocating for small `n`.
pub fn pairwise_map(n: usize, f: impl Fn(usize) -> f64) -> f64 {
    fn rec(lo: usize, hi: usize, f: &impl Fn(usize) -> f64) -> f64 {
        if hi - lo <= LEAF {
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            return acc;
        }
        let mid = lo + (hi - lo) / 2;
        rec(lo, mid, f) + rec(mid, hi, f)
    }
    rec(0, n, &f)
}

/// Weighted sum `Σ w_i x_i` in pairwise order.
pub fn dot(weights: &[f64], values: &[f64]) -> f64 {
    debug_assert_eq!(weights.len(), values.len());
    pairwise_map(weights.len(), |i| weights[i] * values[i])
}
