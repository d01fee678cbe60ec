//! Small regression helpers used by the decay diagnostics.

/// Median of a slice (NaNs sort last); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

/// Ordinary least-squares line through `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Fits `values[k] ≈ c·r^k` and returns `r`.
///
/// Only the leading run of entries above `1e-14 · values[0]` is used, so
/// values that have reached rounding noise do not flatten the fit. Returns 0
/// when fewer than two entries qualify (e.g. when every value is zero).
pub fn geometric_ratio(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else { return 0.0 };
    if !(first > 0.0) {
        return 0.0;
    }
    let floor = 1e-14 * first;
    let usable: Vec<f64> = values.iter().copied().take_while(|v| *v > floor).collect();
    let xs: Vec<f64> = (0..usable.len()).map(|k| k as f64).collect();
    let ys: Vec<f64> = usable.iter().map(|v| v.ln()).collect();
    linear_fit(&xs, &ys).map_or(0.0, |f| f.slope.exp())
}

/// Slope of `ln(y)` against `x` over the points with `y > 0`.
pub fn log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter(|(_, v)| **v > 0.0).map(|(a, v)| (*a, v.ln())).unzip();
    linear_fit(&xs, &ys).map(|f| f.slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_geometric_sequence() {
        let v: Vec<f64> = (0..8).map(|k| 3.0 * 0.4f64.powi(k)).collect();
        assert!((geometric_ratio(&v) - 0.4).abs() < 1e-12);
        assert_eq!(geometric_ratio(&[0.0, 0.0]), 0.0);
        assert_eq!(geometric_ratio(&[1.0]), 0.0);
    }

    #[test]
    fn noise_tail_is_dropped() {
        let mut v: Vec<f64> = (0..5).map(|k| 0.1f64.powi(k)).collect();
        v.extend([1e-17, 1e-16, 1e-17]);
        assert!((geometric_ratio(&v) - 0.1).abs() < 1e-10);
    }

    #[test]
    fn median_and_line() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        let f = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-15 && (f.r_squared - 1.0).abs() < 1e-15);
    }
}
