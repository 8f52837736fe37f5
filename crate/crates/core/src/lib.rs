//! Amortised MCMC.
//!
//! A parametric sampler (the student) is trained to reproduce what a few
//! steps of Langevin dynamics (the teacher) do to its own samples. The crate
//! contains everything needed for that loop at desk scale: a small
//! reverse-mode differentiation engine, target densities, ULA/MALA kernels,
//! sampler families with reparameterised sampling, the three update rules,
//! the training driver and the diagnostics used to judge the result.

pub mod autodiff;
pub mod data_io;
pub mod diagnostics;
pub mod error;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod samplers;
pub mod targets;
pub mod tasks;
pub mod trainer;
pub mod tensor;
pub mod update_rules;

pub use error::{AmcError, Result};

/// Environment variable that caps the worker threads used for per-particle work.
pub const THREADS_ENV: &str = "AMCMC_THREADS";

/// Sizes the global rayon pool from `AMCMC_THREADS` when it is set.
///
/// Call once, before any parallel work. Results do not depend on the thread
/// count because every particle draws from its own random stream.
#[cfg(feature = "parallel")]
pub fn init_threads_from_env() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| AmcError::Config(format!("{THREADS_ENV} must be a positive integer, got '{value}'")))?;
    if n == 0 {
        return Err(AmcError::Config(format!("{THREADS_ENV} must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| AmcError::Config(e.to_string()))
}
