use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, TargetDensity};
use crate::error::{AmcError, Result};

/// A normalised one-dimensional Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl Default for GaussianMixture1D {
    /// `0.5 N(-3, 1) + 0.5 N(3, 1)`.
    fn default() -> Self {
        Self {
            weights: vec![0.5, 0.5],
            means: vec![-3.0, 3.0],
            variances: vec![1.0, 1.0],
        }
    }
}

impl GaussianMixture1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || means.len() != variances.len() {
            return Err(AmcError::Config("mixture component lists differ in length".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(AmcError::Config("mixture variances must be positive".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(AmcError::Config("mixture weights must be positive and sum to 1".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    fn component_logs(&self, z: f64) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w.ln() - 0.5 * (2.0 * PI * v).ln() - (z - m).powi(2) / (2.0 * v))
            .collect()
    }

    pub fn log_pdf(&self, z: f64) -> f64 {
        log_sum_exp(&self.component_logs(z))
    }

    pub fn grad_log_pdf(&self, z: f64) -> f64 {
        let logs = self.component_logs(z);
        let total = log_sum_exp(&logs);
        logs.iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((l, m), v)| (l - total).exp() * (m - z) / v)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w * (v + m * m))
            .sum::<f64>()
            - mean * mean
    }

    /// One exact draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let e: f64 = rng.sample(StandardNormal);
        self.means[idx] + self.variances[idx].sqrt() * e
    }
}

impl TargetDensity for GaussianMixture1D {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.log_pdf(z[0])
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        vec![self.grad_log_pdf(z[0])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn symmetric_modes_have_equal_density() {
        let gmm = GaussianMixture1D::default();
        assert_eq!(gmm.log_pdf(-3.0), gmm.log_pdf(3.0));
        assert_eq!(gmm.grad_log_pdf(0.0), 0.0);
    }

    #[test]
    fn value_at_zero_matches_direct_sum() {
        let gmm = GaussianMixture1D::default();
        let direct = 0.5 * (-4.5f64).exp() / (2.0 * PI).sqrt() * 2.0;
        assert_relative_eq!(gmm.log_pdf(0.0), direct.ln(), epsilon = 1e-14);
        assert_relative_eq!(gmm.log_pdf(0.0), -4.5 - 0.5 * (2.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn far_tails_stay_finite() {
        let gmm = GaussianMixture1D::default();
        assert!(gmm.log_pdf(1e6).is_finite());
        assert!(gmm.grad_log_pdf(-1e6).is_finite());
    }

    #[test]
    fn integrates_to_one() {
        let gmm = GaussianMixture1D::default();
        // composite Simpson on [-15, 15]
        let n = 30_000;
        let (a, b) = (-15.0, 15.0);
        let h = (b - a) / n as f64;
        let f = |x: f64| gmm.log_pdf(x).exp();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        assert!((s * h / 3.0 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let gmm = GaussianMixture1D::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z: f64 = rng.random_range(-8.0..8.0);
            let h = 1e-5;
            let fd = (gmm.log_pdf(z + h) - gmm.log_pdf(z - h)) / (2.0 * h);
            let g = gmm.grad_log_pdf(z);
            assert!((g - fd).abs() / g.abs().max(1e-3) < 1e-5, "z={z}");
        }
    }

    #[test]
    fn moments_of_default_mixture() {
        let gmm = GaussianMixture1D::default();
        assert_eq!(gmm.mean(), 0.0);
        assert_eq!(gmm.variance(), 10.0);
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(GaussianMixture1D::new(vec![0.5, 0.6], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture1D::new(vec![0.5, 0.5], vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(GaussianMixture1D::new(vec![1.0], vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
