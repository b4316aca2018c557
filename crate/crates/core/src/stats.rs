//! Small descriptive statistics shared by the filters, calibration and validation.

/// Quantile of an ascending-sorted slice using linear interpolation between
/// order statistics (position `(n - 1) * q`).
///
/// `q` is clamped to `[0, 1]`. Returns `None` on an empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let q = q.clamp(0.0, 1.0);
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Sorted copy of the finite values in `values`.
pub fn sorted_finite(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Population standard deviation. `None` for an empty input.
pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var.sqrt())
}

/// Median / IQR summary used by the outlier filters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqrSummary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl IqrSummary {
    pub fn from_sorted(sorted: &[f64]) -> Option<Self> {
        Some(IqrSummary {
            median: quantile_sorted(sorted, 0.5)?,
            q1: quantile_sorted(sorted, 0.25)?,
            q3: quantile_sorted(sorted, 0.75)?,
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    /// Inclusive acceptance interval `[median - k*IQR, median + k*IQR]`.
    pub fn bounds(&self, k: f64) -> (f64, f64) {
        let spread = k * self.iqr();
        (self.median - spread, self.median + spread)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let v: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        assert!((quantile_sorted(&v, 0.1).unwrap() - 0.1).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.9).unwrap() - 0.9).abs() < 1e-12);
        let w = [1.0, 2.0, 3.0, 4.0];
        // position 0.75 between 1 and 2
        assert!((quantile_sorted(&w, 0.25).unwrap() - 1.75).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[], 0.5), None);
    }

    #[test]
    fn population_std_of_two_points() {
        assert!((population_std(&[0.2, 0.8]).unwrap() - 0.3).abs() < 1e-12);
        assert_eq!(population_std(&[0.4; 5]).unwrap(), 0.0);
    }
}
