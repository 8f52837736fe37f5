use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{init_rng, mean_std, need, open_artifacts, train_config, Task};
use crate::data_io::{load_csv, save_samples, split, two_moons, Dataset, RunConfig};
use crate::diagnostics::{label_frequency_metrics, predictive_metrics, PredictiveMetrics};
use crate::error::{AmcError, Result};
use crate::samplers::SamplerSpec;
use crate::targets::{BnnArchitecture, BnnPosterior};
use crate::trainer::{fit, Baseline, RunLedger, TargetSource, TrainConfig};

/// Weight samples drawn from a trained sampler for test predictions.
const PREDICTIVE_SAMPLES: usize = 100;
const PREDICTIVE_SEED: u64 = 0x9e37_79b9;
const MOONS_NOISE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodMetrics {
    pub split: usize,
    pub method: String,
    pub log_likelihood: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub log_likelihood: f64,
    pub log_likelihood_std: f64,
    pub error: f64,
    pub error_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BnnReport {
    pub dataset: String,
    pub rows_used: usize,
    pub rows_dropped: usize,
    pub splits: usize,
    pub per_split: Vec<MethodMetrics>,
    /// Means over splits, in method order.
    pub summary: Vec<MethodSummary>,
}

impl BnnReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.summary.iter().find(|m| m.method == name)
    }
}

impl fmt::Display for BnnReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bnn-train on {} ({} rows, {} dropped, {} splits)",
            self.dataset, self.rows_used, self.rows_dropped, self.splits
        )?;
        for m in &self.summary {
            write!(
                f,
                "\n  {:<16} test LL {:.4} +- {:.4}   test error {:.4} +- {:.4}",
                m.method, m.log_likelihood, m.log_likelihood_std, m.error, m.error_std
            )?;
        }
        Ok(())
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, usize)> {
    let name = need(&cfg.dataset, "dataset")?;
    if name == "two_moons" {
        let n = need(&cfg.synthetic_size, "synthetic_size")?;
        return Ok((two_moons(n, MOONS_NOISE, need(&cfg.seed, "seed")?)?, 0));
    }
    let report = load_csv(Path::new(&name), &need(&cfg.label_column, "label_column")?)?;
    Ok((report.dataset, report.dropped_rows))
}

fn predict(spec: &SamplerSpec, arch: BnnArchitecture, test: &Dataset) -> Result<PredictiveMetrics> {
    let weights = spec.sample(PREDICTIVE_SAMPLES, &mut ChaCha8Rng::seed_from_u64(PREDICTIVE_SEED))?;
    predictive_metrics(&weights, arch, &test.features, &test.labels)
}

/// Energy-matching AMC against mean-field VI, stored-particle MALA and the label-frequency predictor.
pub fn bnn_train(user: &RunConfig) -> Result<BnnReport> {
    let (cfg, art) = open_artifacts(Task::BnnTrain, user)?;
    let base = train_config(&cfg)?;
    let (data, rows_dropped) = load_dataset(&cfg)?;
    let hidden = match need(&cfg.hidden, "hidden")?.as_slice() {
        [h] => *h,
        other => {
            return Err(AmcError::Config(format!(
                "the BNN has exactly one hidden layer, got {other:?}"
            )))
        }
    };
    let arch = BnnArchitecture::new(data.dim(), hidden);
    let d = arch.num_params();
    let splits = need(&cfg.splits, "splits")?;
    let test_fraction = need(&cfg.test_fraction, "test_fraction")?;
    let batch_size = need(&cfg.batch_size, "batch_size")?;
    let prior_std = need(&cfg.prior_std, "prior_std")?;
    let init_std = need(&cfg.init_std, "init_std")?;
    let mala_particles = need(&cfg.mala_particles, "mala_particles")?;
    let chain_steps = need(&cfg.chain_steps, "chain_steps")?;
    let record_timing = need(&cfg.record_timing, "record_timing")?;
    if !(init_std > 0.0) {
        return Err(AmcError::Config("init_std must be positive".into()));
    }

    let mut per_split = Vec::new();
    let mut timing = csv::Writer::from_path(art.path("timing.csv"))?;
    timing.write_record(["split", "method", "wall_ms"])?;
    let mut clock = |split: usize, method: &str, started: Instant| -> Result<()> {
        if record_timing {
            timing.write_record([split.to_string(), method.to_string(), started.elapsed().as_millis().to_string()])?;
            timing.flush()?;
        }
        Ok(())
    };

    for s in 0..splits {
        let seed = base.seed + s as u64;
        let (train, test) = split(&data, test_fraction, seed)?;
        let post = BnnPosterior::new(arch, train.features.clone(), train.labels.clone(), prior_std)?;
        let source = if batch_size >= post.len() {
            TargetSource::fixed(&post)
        } else {
            TargetSource::Minibatch {
                posterior: &post,
                batch_size,
            }
        };
        let dir = art.subdir(&format!("split{s}"))?;
        let mut rng = init_rng(seed);
        let mean: Vec<f64> = (0..d).map(|_| init_std * rng.sample::<f64, _>(StandardNormal)).collect();
        let student = SamplerSpec::mean_field_gaussian(mean, vec![init_std.ln(); d])?;
        let mut record = |method: String, m: PredictiveMetrics| {
            per_split.push(MethodMetrics {
                split: s,
                method,
                log_likelihood: m.log_likelihood,
                error: m.error,
            })
        };

        let amc_cfg = TrainConfig { seed, ..base.clone() };
        let started = Instant::now();
        let mut ledger = RunLedger::streaming(&dir.path("amc_ledger.csv"))?;
        let amc = fit(&amc_cfg, source, student.clone().with_ensemble_normalization()?, &mut ledger)?;
        let metrics = predict(&amc.spec, arch, &test)?;
        clock(s, "amc", started)?;
        amc.spec.params.save(&dir.path("phi_amc.json"))?;
        record("amc".into(), metrics);

        let vi_cfg = TrainConfig {
            seed,
            baseline: Baseline::ViMeanfield,
            ..base.clone()
        };
        let started = Instant::now();
        let mut ledger = RunLedger::streaming(&dir.path("vi_ledger.csv"))?;
        let vi = fit(&vi_cfg, source, student.clone(), &mut ledger)?;
        let metrics = predict(&vi.spec, arch, &test)?;
        clock(s, "vi", started)?;
        vi.spec.params.save(&dir.path("phi_vi.json"))?;
        record("vi".into(), metrics);

        for &p in &mala_particles {
            let mala_cfg = TrainConfig {
                seed,
                particles: p,
                iterations: chain_steps,
                baseline: Baseline::McmcOnly,
                ..base.clone()
            };
            let started = Instant::now();
            let name = format!("mala{p}");
            let mut ledger = RunLedger::streaming(&dir.path(&format!("{name}_ledger.csv")))?;
            let run = fit(&mala_cfg, TargetSource::fixed(&post), student.clone(), &mut ledger)?;
            let particles = run
                .chains
                .ok_or_else(|| AmcError::Contract("chain-only run returned no particles".into()))?;
            let metrics = predictive_metrics(&particles, arch, &test.features, &test.labels)?;
            clock(s, &name, started)?;
            save_samples(&particles, &dir.path(&format!("{name}_particles.csv")))?;
            record(name, metrics);
        }

        record("label_frequency".into(), label_frequency_metrics(&train.labels, &test.labels)?);
    }

    let mut out = csv::Writer::from_path(art.path("metrics.csv"))?;
    out.write_record(["split", "method", "test_ll", "test_error"])?;
    for m in &per_split {
        out.write_record([m.split.to_string(), m.method.clone(), m.log_likelihood.to_string(), m.error.to_string()])?;
    }
    out.flush()?;

    let mut methods: Vec<String> = Vec::new();
    for m in &per_split {
        if !methods.contains(&m.method) {
            methods.push(m.method.clone());
        }
    }
    let summary = methods
        .into_iter()
        .map(|method| {
            let ll: Vec<f64> = per_split.iter().filter(|m| m.method == method).map(|m| m.log_likelihood).collect();
            let err: Vec<f64> = per_split.iter().filter(|m| m.method == method).map(|m| m.error).collect();
            let (log_likelihood, log_likelihood_std) = mean_std(&ll);
            let (error, error_std) = mean_std(&err);
            MethodSummary {
                method,
                log_likelihood,
                log_likelihood_std,
                error,
                error_std,
            }
        })
        .collect();
    let report = BnnReport {
        dataset: data.name.clone(),
        rows_used: data.len(),
        rows_dropped,
        splits,
        per_split,
        summary,
    };
    art.write_json("summary.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_run_reports_every_method() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            iterations: Some(5),
            splits: Some(1),
            synthetic_size: Some(40),
            hidden: Some(vec![4]),
            mala_particles: Some(vec![3]),
            chain_steps: Some(5),
            record_timing: Some(false),
            out_dir: Some(dir.path().to_string_lossy().into_owned()),
            ..RunConfig::new()
        };
        let report = bnn_train(&cfg).unwrap();
        let names: Vec<&str> = report.summary.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(names, ["amc", "vi", "mala3", "label_frequency"]);
        for f in ["split0/amc_ledger.csv", "split0/phi_amc.json", "split0/phi_vi.json", "split0/mala3_particles.csv", "metrics.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let timing = std::fs::read_to_string(dir.path().join("timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 1);
    }

    #[test]
    fn two_hidden_layers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            hidden: Some(vec![4, 4]),
            out_dir: Some(dir.path().to_string_lossy().into_owned()),
            ..RunConfig::new()
        };
        assert!(matches!(bnn_train(&cfg), Err(AmcError::Config(_))));
    }
}
