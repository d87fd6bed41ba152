//! Order-fixed reductions and small regression helpers.

/// Pairwise (tree) summation in index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and unbiased sample variance (variance is 0 for one value).
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    assert!(n > 0, "empty sample");
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    (mean, pairwise_sum(&sq) / (n - 1) as f64)
}

/// Least-squares slope of `ys` on `xs`.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn slope_of_a_line() {
        let xs = [2.0, 3.0, 4.0, 5.0, 6.0];
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - 0.75 * x).collect();
        assert!((least_squares_slope(&xs, &ys) + 0.75).abs() < 1e-12);
    }

    #[test]
    fn mean_variance_small() {
        let (m, v) = mean_and_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((v - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_and_variance(&[7.0]), (7.0, 0.0));
    }

    proptest! {
        #[test]
        fn pairwise_matches_naive(xs in prop::collection::vec(-1e3f64..1e3, 0..200)) {
            let naive: f64 = xs.iter().sum();
            prop_assert!((pairwise_sum(&xs) - naive).abs() <= 1e-9 * (1.0 + naive.abs()));
        }
    }
}
