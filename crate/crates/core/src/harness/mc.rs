use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample mean with its standard error `s / √n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub label: String,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl McEstimate {
    pub fn from_samples(label: impl Into<String>, samples: &[f64]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::InvalidSpec(
                "a Monte Carlo estimate needs at least two samples".into(),
            ));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(Self {
            label: label.into(),
            mean,
            se: (var / n as f64).sqrt(),
            n,
        })
    }

    /// Estimate of the mean of `a_i - b_i`, the paired comparison of two
    /// quantities computed on the same paths.
    pub fn paired(label: impl Into<String>, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::InvalidSpec("paired samples differ in length".into()));
        }
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Self::from_samples(label, &diff)
    }

    /// `|mean - target| ≤ k·se + slack`.
    pub fn within(&self, target: f64, k: f64, slack: f64) -> bool {
        (self.mean - target).abs() <= k * self.se + slack
    }

    /// Distance from `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.se > 0.0 {
            (self.mean - target) / self.se
        } else if self.mean == target {
            0.0
        } else {
            f64::INFINITY.copysign(self.mean - target)
        }
    }
}

/// Empirical quantile by linear interpolation between order statistics.
pub fn quantile(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_of_a_known_sample() {
        let e = McEstimate::from_samples("x", &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(e.mean, 2.5);
        assert!((e.se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(McEstimate::from_samples("x", &[1.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&s, 0.0), 1.0);
        assert_eq!(quantile(&s, 1.0), 4.0);
        assert_eq!(quantile(&s, 0.5), 2.5);
    }

    #[test]
    fn constant_estimate_has_zero_se() {
        let e = McEstimate::from_samples("c", &[2.0; 10]).unwrap();
        assert_eq!(e.se, 0.0);
        assert_eq!(e.z_score(2.0), 0.0);
        assert!(e.within(2.0, 3.0, 0.0));
    }
}
