//! Small numeric helpers: deterministic reductions, moment statistics and
//! least-squares fits used by the diagnostics.

/// Fixed-order pairwise summation.
///
/// Every reduction in the crate funnels through this function so that results
/// are bit-identical regardless of how the inputs were produced (serial or
/// parallel workers), as long as the input order is fixed.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n if n <= 32 => values.iter().sum(),
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance; zero for fewer than two points.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Standard error of the mean of i.i.d. replicates.
pub fn standard_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    (sample_variance(values) / n as f64).sqrt()
}

/// Mean and standard error via non-overlapping batch means.
///
/// Suitable for serially correlated sequences (thinned ergodic samples): the
/// batch count trades bias in the SE against its own noise.
pub fn batch_means(values: &[f64], batches: usize) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let b = batches.clamp(2, n.max(2));
    if n < 2 * b {
        return (mean(values), standard_error(values));
    }
    let len = n / b;
    let batch_means: Vec<f64> = (0..b).map(|i| mean(&values[i * len..(i + 1) * len])).collect();
    (mean(values), standard_error(&batch_means))
}

/// Ordinary least squares fit y = intercept + slope * x.
///
/// Returns (slope, intercept, slope standard error). The slope SE comes from
/// the usual residual-variance formula and is zero for a perfect fit.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len(), "linear_fit: input length mismatch");
    let n = x.len();
    if n < 2 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mx = mean(x);
    let my = mean(y);
    let sxx = pairwise_sum(&x.iter().map(|v| (v - mx) * (v - mx)).collect::<Vec<_>>());
    let sxy = pairwise_sum(
        &x.iter()
            .zip(y.iter())
            .map(|(a, b)| (a - mx) * (b - my))
            .collect::<Vec<_>>(),
    );
    if sxx == 0.0 {
        return (f64::NAN, my, f64::NAN);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if n == 2 {
        return (slope, intercept, 0.0);
    }
    let residuals: Vec<f64> = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| {
            let r = b - (intercept + slope * a);
            r * r
        })
        .collect();
    let s2 = pairwise_sum(&residuals) / (n - 2) as f64;
    (slope, intercept, (s2 / sxx).sqrt())
}

/// Fit c * exp(rate * t) to positive data by log-linear least squares.
///
/// Points at or below `floor` are dropped. Returns (rate, log_c, points_used);
/// fewer than two usable points yields NaN rate.
pub fn exp_decay_fit(t: &[f64], v: &[f64], floor: f64) -> (f64, f64, usize) {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(v.iter())
        .filter(|(_, &vi)| vi > floor)
        .map(|(&ti, &vi)| (ti, vi.ln()))
        .collect();
    if pts.len() < 2 {
        return (f64::NAN, f64::NAN, pts.len());
    }
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (slope, intercept, _) = linear_fit(&xs, &ys);
    (slope, intercept, pts.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_serial_on_small_inputs() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let serial: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - serial).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_empty_and_single() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[3.5]), 3.5);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (slope, intercept, se) = linear_fit(&x, &y);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept + 1.0).abs() < 1e-12);
        assert!(se < 1e-10);
    }

    #[test]
    fn exp_fit_recovers_rate() {
        let t: Vec<f64> = (0..20).map(|i| 0.1 * i as f64).collect();
        let v: Vec<f64> = t.iter().map(|ti| 3.0 * (-2.5 * ti).exp()).collect();
        let (rate, logc, used) = exp_decay_fit(&t, &v, 0.0);
        assert_eq!(used, 20);
        assert!((rate + 2.5).abs() < 1e-9);
        assert!((logc - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn batch_means_near_iid_se() {
        let v: Vec<f64> = (0..4096).map(|i| ((i * 2654435761_usize) % 1000) as f64 / 1000.0).collect();
        let (m, se) = batch_means(&v, 16);
        assert!((m - mean(&v)).abs() < 1e-12);
        assert!(se > 0.0 && se < 0.1);
    }
}
