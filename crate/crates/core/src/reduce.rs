//! Order-fixed reductions. Results depend only on the input order, never on
//! how many worker threads produced the inputs.

use crate::real::Real;

/// Pairwise (tree) summation with a fixed split rule.
pub fn pairwise_sum<T: Real>(values: &[T]) -> T {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Samples are processed in chunks of this size; chunk boundaries never depend
/// on the thread count.
pub const CHUNK: usize = 2048;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_sum_on_small_inputs() {
        let v: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), 22.5);
        assert_eq!(pairwise_sum::<f64>(&[]), 0.0);
    }

    #[test]
    fn large_input_is_accurate() {
        let v = vec![0.1f64; 100_000];
        assert!((pairwise_sum(&v) - 10_000.0).abs() < 1e-9);
    }
}
