//! Browser demo: fit a sampler to the two-mode mixture, trace a single MALA
//! chain and plot KL to the stationary law along a finite chain.
//!
//! Every export returns a JSON string; the plain `*_json` functions do the
//! work and are what the native tests call.

use amcmc::data_io::RunConfig;
use amcmc::kernels::{run_chain_traced, KernelConfig, ParticleStreams, Provenance, SampleBatch};
use amcmc::targets::{FiniteChain, GaussianMixture1D};
use amcmc::tasks::{build_sampler, resolve, train_config, Task};
use amcmc::trainer::{evaluation_samples, fit, RunLedger, TargetSource};
use amcmc::{AmcError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

const HISTOGRAM_BINS: usize = 60;
const PLOT_RANGE: (f64, f64) = (-8.0, 8.0);

fn histogram(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = PLOT_RANGE;
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut counts = vec![0.0; HISTOGRAM_BINS];
    for v in values {
        if (lo..hi).contains(v) {
            counts[((v - lo) / width) as usize] += 1.0;
        }
    }
    // normalised to a density so it overlays the target curve
    let scale = 1.0 / (values.len() as f64 * width);
    counts.iter().map(|c| c * scale).collect()
}

fn target_curve(target: &GaussianMixture1D) -> Vec<[f64; 2]> {
    let (lo, hi) = PLOT_RANGE;
    (0..=200)
        .map(|i| {
            let z = lo + (hi - lo) * i as f64 / 200.0;
            [z, target.log_pdf(z).exp()]
        })
        .collect()
}

/// Trains `family` ("implicit_mlp" or "variational_program") with the adversarial rule.
pub fn fit_mixture_json(family: &str, seed: u64, iterations: usize, lr: f64) -> Result<String> {
    let user = RunConfig {
        sampler: Some(family.to_string()),
        seed: Some(seed),
        iterations: Some(iterations),
        lr_phi: Some(lr),
        lr_psi: Some(lr),
        eval_every: Some((iterations / 20).max(1)),
        ksd_samples: Some(500),
        ..RunConfig::new()
    };
    let cfg = resolve(Task::GmmFit, &user)?;
    let train = train_config(&cfg)?;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    init.set_stream(1);
    let spec = build_sampler(&cfg, 1, &mut init)?;
    let target = GaussianMixture1D::default();
    let mut ledger = RunLedger::new();
    let out = fit(&train, TargetSource::fixed(&target), spec, &mut ledger)?;
    let ksd: Vec<[f64; 2]> = ledger
        .records()
        .iter()
        .filter_map(|r| r.ksd.map(|k| [(r.iteration + 1) as f64, k]))
        .collect();
    let samples = evaluation_samples(&out.spec, &train)?.column(0);
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(json!({
        "family": family,
        "initial_ksd": out.initial_ksd,
        "final_ksd": out.final_ksd,
        "ksd_trace": ksd,
        "mean": mean,
        "variance": variance,
        "range": PLOT_RANGE,
        "histogram": histogram(&samples),
        "target": target_curve(&target),
    })
    .to_string())
}

/// One MALA (or ULA) chain on the mixture, starting at `start`.
pub fn mala_trace_json(seed: u64, steps: usize, step_size: f64, start: f64, metropolis: bool) -> Result<String> {
    let target = GaussianMixture1D::default();
    let config = KernelConfig {
        metropolis_adjust: metropolis,
        ..KernelConfig::mala(steps, step_size)
    };
    config.validate()?;
    let batch = SampleBatch::from_rows(&[[start]], Provenance::StudentInitial)?;
    let (run, trace) = run_chain_traced(&batch, &config, &target, &mut ParticleStreams::new(seed, 1))?;
    let path: Vec<f64> = std::iter::once(start).chain(trace.iter().map(|r| r.z[0])).collect();
    Ok(json!({
        "path": path,
        "acceptance_rate": run.acceptance_rate,
        "fraction_right": path.iter().filter(|z| **z > 0.0).count() as f64 / path.len() as f64,
    })
    .to_string())
}

/// KL(q_t || pi) along a random reversible chain with `states` states.
pub fn lemma1_curve_json(seed: u64, states: usize, steps: usize) -> Result<String> {
    if states < 2 {
        return Err(AmcError::Config("need at least two states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = FiniteChain::random_reversible(states, 0.1, &mut rng);
    let raw: Vec<f64> = (0..states).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let q0: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let kl = chain.kl_trajectory(&q0, steps)?;
    let increases = kl.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    Ok(json!({
        "stationary": chain.stationary(),
        "initial": q0,
        "kl": kl,
        "increases": increases,
    })
    .to_string())
}

fn js(result: Result<String>) -> std::result::Result<String, JsError> {
    result.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn fit_mixture(family: &str, seed: u32, iterations: u32, lr: f64) -> std::result::Result<String, JsError> {
    js(fit_mixture_json(family, seed as u64, iterations as usize, lr))
}

#[wasm_bindgen]
pub fn mala_trace(seed: u32, steps: u32, step_size: f64, start: f64, metropolis: bool) -> std::result::Result<String, JsError> {
    js(mala_trace_json(seed as u64, steps as usize, step_size, start, metropolis))
}

#[wasm_bindgen]
pub fn lemma1_curve(seed: u32, states: u32, steps: u32) -> std::result::Result<String, JsError> {
    js(lemma1_curve_json(seed as u64, states as usize, steps as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn short_fit_reports_trace_and_histogram() {
        let v = parse(&fit_mixture_json("variational_program", 1, 200, 1e-3).unwrap());
        assert_eq!(v["histogram"].as_array().unwrap().len(), HISTOGRAM_BINS);
        assert_eq!(v["ksd_trace"].as_array().unwrap().len(), 20);
        assert!(v["final_ksd"].as_f64().unwrap().is_finite());
        let area: f64 = v["histogram"].as_array().unwrap().iter().map(|c| c.as_f64().unwrap()).sum::<f64>()
            * (PLOT_RANGE.1 - PLOT_RANGE.0)
            / HISTOGRAM_BINS as f64;
        assert!(area <= 1.0 + 1e-9);
    }

    #[test]
    fn unknown_family_is_an_error() {
        assert!(fit_mixture_json("flow", 1, 10, 1e-3).is_err());
    }

    #[test]
    fn trace_has_one_entry_per_step_plus_start() {
        let v = parse(&mala_trace_json(3, 500, 0.5, -3.0, true).unwrap());
        assert_eq!(v["path"].as_array().unwrap().len(), 501);
        let acc = v["acceptance_rate"].as_f64().unwrap();
        assert!(acc > 0.5 && acc <= 1.0);
    }

    #[test]
    fn ula_trace_accepts_everything() {
        let v = parse(&mala_trace_json(3, 50, 0.1, 0.0, false).unwrap());
        assert_eq!(v["acceptance_rate"].as_f64().unwrap(), 1.0);
    }

    #[test]
    fn kl_curve_never_rises() {
        let v = parse(&lemma1_curve_json(7, 6, 50).unwrap());
        assert_eq!(v["kl"].as_array().unwrap().len(), 51);
        assert_eq!(v["increases"], 0);
    }

    #[test]
    fn single_state_chain_is_rejected() {
        assert!(lemma1_curve_json(7, 1, 50).is_err());
    }
}
