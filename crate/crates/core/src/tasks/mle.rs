use std::fmt;

use serde::Serialize;

use super::{init_rng, kernel_config, moving_average, need, open_artifacts, Task};
use crate::data_io::{linear_gaussian, RunConfig};
use crate::error::Result;
use crate::nn::Activation;
use crate::trainer::{
    fit_generative, procrustes_relative_error, GaussianEncoder, GenerativeModel, MleConfig, RunLedger,
};

/// Window of the smoothed objective trace.
pub const OBJECTIVE_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MleToyReport {
    pub iterations: usize,
    /// Smoothed `E_q_T[log p(x | z, theta)]` over the first and last windows.
    pub objective_start: Option<f64>,
    pub objective_end: Option<f64>,
    /// Relative Frobenius error of the aligned decoder weights; linear decoders only.
    pub weight_error: Option<f64>,
    pub final_step_size: f64,
}

impl fmt::Display for MleToyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mle-toy after {} iterations", self.iterations)?;
        if let (Some(a), Some(b)) = (self.objective_start, self.objective_end) {
            write!(f, ": smoothed objective {a:.4} -> {b:.4}")?;
        }
        if let Some(e) = self.weight_error {
            write!(f, ", decoder weight error {e:.4}")?;
        }
        Ok(())
    }
}

/// Joint encoder/decoder training on synthetic linear-Gaussian data with known weights.
pub fn mle_toy(user: &RunConfig) -> Result<MleToyReport> {
    let (cfg, art) = open_artifacts(Task::MleToy, user)?;
    let seed = need(&cfg.seed, "seed")?;
    let latent = need(&cfg.latent_dim, "latent_dim")?;
    let obs = need(&cfg.obs_dim, "obs_dim")?;
    let noise = need(&cfg.obs_noise, "obs_noise")?;
    let data = linear_gaussian(need(&cfg.data_size, "data_size")?, latent, obs, noise, seed)?;

    let mut sizes = vec![latent];
    sizes.extend(need(&cfg.hidden, "hidden")?);
    sizes.push(obs);
    let activation: Activation = need(&cfg.activation, "activation")?.parse()?;
    let mut rng = init_rng(seed);
    let model = GenerativeModel::new(&sizes, activation, noise, &mut rng)?;
    let encoder = GaussianEncoder::new(obs, latent, &mut rng)?;
    let mle = MleConfig {
        iterations: need(&cfg.iterations, "iterations")?,
        batch_size: need(&cfg.batch_size, "batch_size")?,
        kernel: kernel_config(&cfg)?,
        lr_phi: need(&cfg.lr_phi, "lr_phi")?,
        lr_theta: need(&cfg.lr_theta, "lr_theta")?,
        seed,
    };

    let mut ledger = RunLedger::streaming(&art.path("ledger.csv"))?;
    let out = fit_generative(&mle, &data.x, model, encoder, &mut ledger)?;
    out.model.theta.save(&art.path("theta.json"))?;
    out.encoder.params.save(&art.path("phi.json"))?;

    let smooth = moving_average(&out.objective_trace, OBJECTIVE_WINDOW);
    let mut trace = csv::Writer::from_path(art.path("objective.csv"))?;
    trace.write_record(["iteration", "objective", "smoothed"])?;
    for (i, v) in out.objective_trace.iter().enumerate() {
        let s = (i + 1)
            .checked_sub(OBJECTIVE_WINDOW)
            .and_then(|j| smooth.get(j))
            .map(|s| s.to_string())
            .unwrap_or_default();
        trace.write_record([i.to_string(), v.to_string(), s])?;
    }
    trace.flush()?;

    let weight_error = if sizes.len() == 2 {
        Some(procrustes_relative_error(out.model.theta.get("layer0.weight")?, &data.weight)?)
    } else {
        None
    };
    let report = MleToyReport {
        iterations: mle.iterations,
        objective_start: smooth.first().copied(),
        objective_end: smooth.last().copied(),
        weight_error,
        final_step_size: out.kernel.step_size,
    };
    art.write_json("summary.json", &report)?;
    Ok(report)
}
