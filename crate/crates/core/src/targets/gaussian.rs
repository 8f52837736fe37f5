use std::f64::consts::PI;

use super::TargetDensity;
use crate::error::{AmcError, Result};

/// Diagonal Gaussian target.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(AmcError::Config("gaussian mean/std lengths differ".into()));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(AmcError::Config("gaussian std must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

impl TargetDensity for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
            .sum()
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((z, m), s)| -(z - m) / (s * s))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_gradient_is_minus_z() {
        let g = DiagGaussian::standard(3);
        assert_eq!(g.grad_log_density(&[1.0, -2.0, 0.5]), vec![-1.0, 2.0, -0.5]);
    }

    #[test]
    fn rejects_bad_std() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }
}
