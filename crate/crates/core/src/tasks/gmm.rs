use std::fmt;

use serde::Serialize;

use super::{build_sampler, init_rng, mean_std, need, open_artifacts, train_config, Artifacts, Task};
use crate::data_io::{save_samples, RunConfig};
use crate::diagnostics::{ksd, mode_coverage, KsdConfig};
use crate::error::{AmcError, Result};
use crate::targets::GaussianMixture1D;
use crate::trainer::{evaluation_samples, fit, RunLedger, TargetSource};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GmmFitReport {
    pub seed: u64,
    pub iterations: usize,
    /// KSD of the untrained sampler.
    pub initial_ksd: f64,
    pub final_ksd: f64,
    pub sample_mean: f64,
    pub sample_variance: f64,
    /// Fractions of the evaluation samples below and above zero.
    pub mode_fractions: Vec<f64>,
}

impl fmt::Display for GmmFitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gmm-fit seed {}: KSD {:.5} -> {:.5}, mean {:.3}, variance {:.3}, mode fractions {:.3}/{:.3}",
            self.seed,
            self.initial_ksd,
            self.final_ksd,
            self.sample_mean,
            self.sample_variance,
            self.mode_fractions[0],
            self.mode_fractions[1]
        )
    }
}

/// Trains one sampler on the two-component mixture.
pub fn gmm_fit(user: &RunConfig) -> Result<GmmFitReport> {
    let (cfg, art) = open_artifacts(Task::GmmFit, user)?;
    run_gmm(&cfg, &art)
}

fn run_gmm(cfg: &RunConfig, art: &Artifacts) -> Result<GmmFitReport> {
    let target = GaussianMixture1D::default();
    let train = train_config(cfg)?;
    let spec = build_sampler(cfg, 1, &mut init_rng(train.seed))?;
    train.validate(&spec)?;
    let ksd_cfg = KsdConfig::default();
    let initial_ksd = ksd(&evaluation_samples(&spec, &train)?, &target, &ksd_cfg)?;

    let mut ledger = RunLedger::streaming(&art.path("ledger.csv"))?;
    let out = fit(&train, TargetSource::fixed(&target), spec, &mut ledger)?;
    out.spec.params.save(&art.path("phi.json"))?;
    out.spec.save(&art.path("sampler.json"))?;
    if let Some(disc) = &out.disc {
        disc.params.save(&art.path("psi.json"))?;
    }

    let samples = evaluation_samples(&out.spec, &train)?;
    save_samples(&samples, &art.path("samples.csv"))?;
    let final_ksd = match out.final_ksd {
        Some(v) => v,
        None => ksd(&samples, &target, &ksd_cfg)?,
    };
    let values: Vec<f64> = samples.column(0);
    let n = values.len() as f64;
    let sample_mean = values.iter().sum::<f64>() / n;
    let sample_variance = values.iter().map(|v| (v - sample_mean).powi(2)).sum::<f64>() / n;
    let report = GmmFitReport {
        seed: train.seed,
        iterations: train.iterations,
        initial_ksd,
        final_ksd,
        sample_mean,
        sample_variance,
        mode_fractions: mode_coverage(&values, &[0.0]),
    };
    art.write_json("summary.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub steps: usize,
    pub step_size: f64,
    pub t_eta: f64,
    pub repeats: usize,
    pub mean_ksd: f64,
    pub std_ksd: f64,
    pub final_ksds: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, r) in self.rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(
                f,
                "gmm-sweep T={} eta={} (T*eta={}): final KSD {:.5} +- {:.5} over {} runs",
                r.steps, r.step_size, r.t_eta, r.mean_ksd, r.std_ksd, r.repeats
            )?;
        }
        Ok(())
    }
}

/// Chain-length sweep at a fixed product `T * eta`, repeated with consecutive seeds.
pub fn gmm_sweep(user: &RunConfig) -> Result<SweepReport> {
    let (cfg, art) = open_artifacts(Task::GmmSweep, user)?;
    let grid = need(&cfg.grid, "grid")?;
    let repeats = need(&cfg.repeats, "repeats")?;
    let seed = need(&cfg.seed, "seed")?;
    if grid.is_empty() || repeats == 0 {
        return Err(AmcError::Config("the sweep needs a non-empty grid and at least one repeat".into()));
    }
    let product = grid[0].0 as f64 * grid[0].1;
    for &(t, eta) in &grid {
        let p = t as f64 * eta;
        if (p - product).abs() > 1e-9 * product.abs() {
            return Err(AmcError::Config(format!(
                "every grid point must share T*eta = {product}, but ({t}, {eta}) gives {p}"
            )));
        }
    }

    let mut runs = csv::Writer::from_path(art.path("runs.csv"))?;
    runs.write_record(["steps", "step_size", "t_eta", "repeat", "seed", "final_ksd"])?;
    let mut rows = Vec::with_capacity(grid.len());
    for &(t, eta) in &grid {
        let mut finals = Vec::with_capacity(repeats);
        for r in 0..repeats {
            let run_cfg = RunConfig {
                kernel_steps: Some(t),
                step_size: Some(eta),
                seed: Some(seed + r as u64),
                ..cfg.clone()
            };
            let run_art = Artifacts::create(&art.path(&format!("T{t}_eta{eta}/rep{r}")), &run_cfg)?;
            let report = run_gmm(&run_cfg, &run_art)?;
            runs.write_record([
                t.to_string(),
                eta.to_string(),
                (t as f64 * eta).to_string(),
                r.to_string(),
                (seed + r as u64).to_string(),
                report.final_ksd.to_string(),
            ])?;
            runs.flush()?;
            finals.push(report.final_ksd);
        }
        let (mean_ksd, std_ksd) = mean_std(&finals);
        rows.push(SweepRow {
            steps: t,
            step_size: eta,
            t_eta: t as f64 * eta,
            repeats,
            mean_ksd,
            std_ksd,
            final_ksds: finals,
        });
    }

    let mut summary = csv::Writer::from_path(art.path("summary.csv"))?;
    summary.write_record(["steps", "step_size", "t_eta", "repeats", "mean_ksd", "std_ksd"])?;
    for r in &rows {
        summary.write_record([
            r.steps.to_string(),
            r.step_size.to_string(),
            r.t_eta.to_string(),
            r.repeats.to_string(),
            r.mean_ksd.to_string(),
            r.std_ksd.to_string(),
        ])?;
    }
    summary.flush()?;
    let report = SweepReport { rows };
    art.write_json("summary.json", &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(dir: &std::path::Path) -> RunConfig {
        RunConfig {
            iterations: Some(20),
            eval_every: Some(10),
            ksd_samples: Some(50),
            out_dir: Some(dir.to_string_lossy().into_owned()),
            ..RunConfig::new()
        }
    }

    #[test]
    fn fit_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let report = gmm_fit(&quick(dir.path())).unwrap();
        for f in ["config.json", "ledger.csv", "phi.json", "psi.json", "sampler.json", "samples.csv", "summary.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
        assert_eq!(ledger.lines().count(), 21);
        assert!((report.mode_fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_leave_an_empty_ledger() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            iterations: Some(0),
            ..quick(dir.path())
        };
        let report = gmm_fit(&cfg).unwrap();
        let ledger = std::fs::read_to_string(dir.path().join("ledger.csv")).unwrap();
        assert_eq!(ledger.lines().count(), 1);
        assert_eq!(report.initial_ksd, report.final_ksd);
    }

    #[test]
    fn single_repeat_sweep_has_three_rows_at_constant_product() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            repeats: Some(1),
            ..quick(dir.path())
        };
        let report = gmm_sweep(&cfg).unwrap();
        assert_eq!(report.rows.len(), 3);
        for r in &report.rows {
            assert!((r.t_eta - report.rows[0].t_eta).abs() < 1e-12);
        }
        let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 4);
    }

    #[test]
    fn uneven_grid_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            repeats: Some(1),
            grid: Some(vec![(1, 0.1), (5, 0.1)]),
            ..quick(dir.path())
        };
        assert!(matches!(gmm_sweep(&cfg), Err(AmcError::Config(_))));
    }
}
