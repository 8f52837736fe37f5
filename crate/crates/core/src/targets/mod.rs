//! Unnormalised target log-densities and their gradients.

mod bnn;
mod chain;
mod gaussian;
mod gmm;

pub use bnn::{BnnArchitecture, BnnPosterior};
pub use chain::{chain_evolve_exact, kl_divergence, FiniteChain};
pub use gaussian::DiagGaussian;
pub use gmm::GaussianMixture1D;

/// A differentiable, possibly unnormalised, log-density over `R^dim`.
///
/// Implementations are pure and may be shared between threads.
pub trait TargetDensity: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, z: &[f64]) -> f64;

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64>;

    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        (self.log_density(z), self.grad_log_density(z))
    }
}

impl<T: TargetDensity + ?Sized> TargetDensity for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        (**self).log_density(z)
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        (**self).grad_log_density(z)
    }

    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        (**self).value_and_grad(z)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
