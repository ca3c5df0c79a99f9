use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile of an ascending slice (R's type 7).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean with a central credible interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Lower / upper probabilities of the 90% interval.
pub const CI_LOWER: f64 = 0.05;
pub const CI_UPPER: f64 = 0.95;

impl Summary {
    /// Mean and 5%/95% quantiles of `values`.
    pub fn of(values: &[f64]) -> Self {
        Self::with_levels(values, CI_LOWER, CI_UPPER)
    }

    pub fn with_levels(values: &[f64], lower: f64, upper: f64) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let lo = quantile(&sorted, lower);
        let hi = quantile(&sorted, upper);
        // summation can put a constant sample's mean an ulp outside
        Self {
            mean: mean.clamp(sorted[0], sorted[sorted.len() - 1]),
            lower: lo,
            upper: hi,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}
