const BLOCK: usize = 16;

/// Cascade summation: O(log n · ε) error growth instead of O(n · ε).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pairwise-summed dot product. `scratch` is reused to avoid allocation.
pub(crate) fn pairwise_dot(a: &[f64], b: &[f64], scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(a.iter().zip(b).map(|(x, y)| x * y));
    pairwise_sum(scratch)
}
