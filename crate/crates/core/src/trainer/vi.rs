use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TargetSource;
use crate::autodiff::Tape;
use crate::error::{AmcError, Result};
use crate::optim::Adam;
use crate::samplers::SamplerSpec;
use crate::targets::TargetDensity;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViConfig {
    pub iterations: usize,
    /// Monte Carlo samples per gradient estimate.
    pub samples: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            samples: 10,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ViOutcome {
    pub spec: SamplerSpec,
    /// Per-iteration ELBO estimate, taken before each update.
    pub elbo_trace: Vec<f64>,
}

/// Monte Carlo estimate of `E_q[log p(z) - log q(z)]`.
pub fn elbo_estimate<T: TargetDensity + ?Sized>(
    spec: &SamplerSpec,
    target: &T,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let batch = spec.sample(samples, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut total = 0.0;
    for z in batch.iter() {
        total += target.log_density(z) - spec.log_density(z)?;
    }
    Ok(total / samples as f64)
}

/// Reparameterised ELBO ascent for a mean-field Gaussian.
pub fn vi_baseline_fit(spec: SamplerSpec, source: TargetSource<'_>, config: &ViConfig) -> Result<ViOutcome> {
    if !spec.density_tractable() {
        return Err(AmcError::Config("VI needs a mean-field Gaussian with a tractable density".into()));
    }
    if config.samples < 1 || !(config.lr > 0.0) {
        return Err(AmcError::Config("VI needs samples >= 1 and a positive learning rate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut spec = spec;
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut step = || -> Result<f64> {
            let minibatch = source.draw(&mut rng)?;
            let target: &dyn TargetDensity = match &minibatch {
                Some(t) => t,
                None => source.full(),
            };
            let tape = Tape::new();
            let phi = tape.bind(&spec.params);
            let (z, _) = spec.sample_var(&tape, &phi, config.samples, &mut rng)?;
            let log_p = tape.row_function(z, |row| target.value_and_grad(row))?;
            let log_q = spec.log_density_var(&phi, z)?;
            let elbo = log_p.sub(log_q)?.mean();
            let value = elbo.item()?;
            if !value.is_finite() {
                return Err(AmcError::NonFinite(format!("ELBO is {value}")));
            }
            let grads = tape.grad(elbo.neg(), &phi)?;
            spec.params = adam.step(&spec.params, &grads, config.lr)?;
            Ok(value)
        };
        trace.push(step().map_err(|e| e.at_iteration(it))?);
    }
    Ok(ViOutcome { spec, elbo_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::DiagGaussian;

    fn run(target: &DiagGaussian, iterations: usize) -> ViOutcome {
        let spec = SamplerSpec::mean_field_gaussian(vec![1.0], vec![-1.0]).unwrap();
        let cfg = ViConfig {
            iterations,
            samples: 10,
            lr: 0.01,
            seed: 3,
        };
        vi_baseline_fit(spec, TargetSource::fixed(target), &cfg).unwrap()
    }

    fn moments(spec: &SamplerSpec) -> (f64, f64) {
        (
            spec.params.get("mean").unwrap().values()[0],
            spec.params.get("log_std").unwrap().values()[0].exp(),
        )
    }

    #[test]
    fn recovers_standard_normal() {
        let out = run(&DiagGaussian::standard(1), 4000);
        let (mu, sigma) = moments(&out.spec);
        assert!(mu.abs() < 0.05, "mu {mu}");
        assert!((sigma - 1.0).abs() < 0.05, "sigma {sigma}");
    }

    #[test]
    fn recovers_shifted_mean_and_elbo_rises() {
        let target = DiagGaussian::new(vec![3.0], vec![0.5]).unwrap();
        let out = run(&target, 4000);
        let (mu, _) = moments(&out.spec);
        assert!((mu - 3.0).abs() < 0.05, "mu {mu}");
        let smooth: Vec<f64> = out
            .elbo_trace
            .chunks(50)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        // Monte Carlo noise and Adam jitter near the optimum are around 1e-2
        for w in smooth.windows(2) {
            assert!(w[1] >= w[0] - 0.02, "{} -> {}", w[0], w[1]);
        }
        assert!(smooth[0] < smooth.last().unwrap() - 1.0);
        // the target is in the family, so the optimum has ELBO log Z = 0
        assert!(smooth.last().unwrap().abs() < 0.01);
    }

    #[test]
    fn refuses_wild_samplers() {
        let spec = SamplerSpec::variational_program(1.0, 0.0, 1.0, 0.0).unwrap();
        let target = DiagGaussian::standard(1);
        assert!(vi_baseline_fit(spec, TargetSource::fixed(&target), &ViConfig::default()).is_err());
    }
}
