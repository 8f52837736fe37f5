use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{need, open_artifacts, Task};
use crate::data_io::{load_samples, RunConfig};
use crate::diagnostics::{count_increases, ksd, lemma1_monotonicity_check, median_bandwidth, KsdConfig};
use crate::error::Result;
use crate::targets::{FiniteChain, GaussianMixture1D};

/// Holding probability mixed into the random chains.
const LAZINESS: f64 = 0.1;
/// Rounding allowance when checking that KL never rises.
pub const LEMMA1_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsdEvalReport {
    pub samples: usize,
    pub bandwidth: f64,
    pub ksd: f64,
}

impl fmt::Display for KsdEvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ksd-eval: KSD {} over {} samples (bandwidth {:.5})", self.ksd, self.samples, self.bandwidth)
    }
}

/// KSD of a samples file against the mixture target.
pub fn ksd_eval(user: &RunConfig) -> Result<KsdEvalReport> {
    let (cfg, art) = open_artifacts(Task::KsdEval, user)?;
    let batch = load_samples(Path::new(&need(&cfg.samples, "samples")?))?;
    let target = GaussianMixture1D::default();
    let report = KsdEvalReport {
        samples: batch.len(),
        bandwidth: median_bandwidth(&batch),
        ksd: ksd(&batch, &target, &KsdConfig::default())?,
    };
    art.write_json("summary.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub chains: usize,
    pub states: usize,
    pub steps: usize,
    /// Steps, over all chains, where KL to the stationary law rose.
    pub violations: usize,
    pub largest_increase: f64,
}

impl fmt::Display for Lemma1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lemma1-check: {} violations over {} chains x {} steps ({} states)",
            self.violations, self.chains, self.steps, self.states
        )
    }
}

/// KL to the stationary law along random reversible chains, computed exactly.
pub fn lemma1_check(user: &RunConfig) -> Result<Lemma1Report> {
    let (cfg, art) = open_artifacts(Task::Lemma1Check, user)?;
    let chains = need(&cfg.chains, "chains")?;
    let states = need(&cfg.states, "states")?;
    let steps = need(&cfg.chain_steps, "chain_steps")?;
    let mut rng = ChaCha8Rng::seed_from_u64(need(&cfg.seed, "seed")?);
    let mut out = csv::Writer::from_path(art.path("lemma1.csv"))?;
    out.write_record(["chain", "step", "kl"])?;
    let mut violations = 0;
    let mut largest_increase = f64::NEG_INFINITY;
    for c in 0..chains {
        let chain = FiniteChain::random_reversible(states, LAZINESS, &mut rng);
        let raw: Vec<f64> = (0..states).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q0: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let kl = lemma1_monotonicity_check(chain.transition(), chain.stationary(), &q0, steps)?;
        violations += count_increases(&kl, LEMMA1_SLACK);
        for w in kl.windows(2) {
            largest_increase = largest_increase.max(w[1] - w[0]);
        }
        for (t, v) in kl.iter().enumerate() {
            out.write_record([c.to_string(), t.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    let report = Lemma1Report {
        chains,
        states,
        steps,
        violations,
        largest_increase,
    };
    art.write_json("summary.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::AmcError;

    #[test]
    fn default_lemma1_run_has_no_violations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: Some(dir.path().to_string_lossy().into_owned()),
            ..RunConfig::new()
        };
        let report = lemma1_check(&cfg).unwrap();
        assert_eq!(report.violations, 0);
        assert!(report.largest_increase <= LEMMA1_SLACK);
        let rows = std::fs::read_to_string(dir.path().join("lemma1.csv")).unwrap();
        assert_eq!(rows.lines().count(), 1 + 20 * 101);
    }

    #[test]
    fn ksd_eval_without_samples_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            out_dir: Some(dir.path().to_string_lossy().into_owned()),
            ..RunConfig::new()
        };
        assert!(matches!(ksd_eval(&cfg), Err(AmcError::Config(_))));
    }
}
