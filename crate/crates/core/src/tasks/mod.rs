//! Experiment drivers behind the command-line subcommands.
//!
//! Every task resolves the user's [`RunConfig`] against its own defaults,
//! writes the resolved configuration to `config.json` in the output directory
//! before doing any work, and then leaves its ledgers, checkpoints and CSV
//! summaries next to it.

mod bnn;
mod checks;
mod gmm;
mod mle;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::data_io::{RunConfig, CONFIG_VERSION};
use crate::error::{AmcError, Result};
use crate::kernels::KernelConfig;
use crate::nn::Activation;
use crate::samplers::{SamplerFamily, SamplerSpec};
use crate::trainer::{Baseline, TrainConfig};
use crate::update_rules::UpdateRuleConfig;

pub use bnn::{bnn_train, BnnReport, MethodMetrics};
pub use checks::{ksd_eval, lemma1_check, KsdEvalReport, Lemma1Report};
pub use gmm::{gmm_fit, gmm_sweep, GmmFitReport, SweepReport, SweepRow};
pub use mle::{mle_toy, MleToyReport, OBJECTIVE_WINDOW};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    GmmFit,
    GmmSweep,
    BnnTrain,
    MleToy,
    KsdEval,
    Lemma1Check,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::GmmFit,
        Task::GmmSweep,
        Task::BnnTrain,
        Task::MleToy,
        Task::KsdEval,
        Task::Lemma1Check,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::GmmFit => "gmm-fit",
            Task::GmmSweep => "gmm-sweep",
            Task::BnnTrain => "bnn-train",
            Task::MleToy => "mle-toy",
            Task::KsdEval => "ksd-eval",
            Task::Lemma1Check => "lemma1-check",
        }
    }
}

impl FromStr for Task {
    type Err = AmcError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s || t.name().replace('-', "_") == s)
            .ok_or_else(|| AmcError::Config(format!("unknown task '{s}'")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by every task that trains a sampler.
fn training_defaults() -> RunConfig {
    RunConfig {
        seed: Some(0),
        particles: Some(10),
        hidden: Some(vec![20, 20]),
        noise_dim: Some(3),
        activation: Some("relu".into()),
        rule: Some("adversarial_js".into()),
        beta: Some(1.0),
        generator_loss: Some("nonsaturating".into()),
        independent_z0: Some(false),
        disc_steps: Some(1),
        disc_hidden: Some(vec![20, 20]),
        kernel_steps: Some(10),
        step_size: Some(0.1),
        metropolis_adjust: Some(true),
        adapt_rate: Some(0.01),
        adapt_window: Some(100),
        lr_phi: Some(1e-3),
        lr_psi: Some(1e-3),
        lr_theta: Some(1e-3),
        lr_final_scale: Some(1.0),
        eval_every: Some(0),
        persistent: Some(false),
        ksd_samples: Some(1000),
        record_timing: Some(false),
        ..RunConfig::new()
    }
}

/// The full configuration a task runs with when the user sets nothing.
pub fn defaults(task: Task) -> RunConfig {
    let out_dir = Some(format!("runs/{}", task.name()));
    let gmm = RunConfig {
        iterations: Some(40_000),
        sampler: Some("implicit_mlp".into()),
        lr_phi: Some(1e-4),
        lr_psi: Some(1e-4),
        eval_every: Some(2000),
        ..training_defaults()
    };
    let mut cfg = match task {
        Task::GmmFit => gmm,
        Task::GmmSweep => RunConfig {
            repeats: Some(10),
            grid: Some(vec![(1, 0.1), (5, 0.02), (10, 0.01)]),
            ..gmm
        },
        Task::BnnTrain => RunConfig {
            iterations: Some(10_000),
            sampler: Some("mean_field_gaussian".into()),
            hidden: Some(vec![50]),
            rule: Some("energy_matching".into()),
            beta: Some(2.0),
            kernel_steps: Some(1),
            step_size: Some(1e-3),
            acceptance_target: Some(0.99),
            dataset: Some("two_moons".into()),
            label_column: Some("label".into()),
            synthetic_size: Some(400),
            test_fraction: Some(0.2),
            splits: Some(5),
            batch_size: Some(32),
            prior_std: Some(1.0),
            mala_particles: Some(vec![100, 10]),
            chain_steps: Some(2000),
            record_timing: Some(true),
            init_std: Some(0.1),
            ..training_defaults()
        },
        Task::MleToy => RunConfig {
            iterations: Some(3000),
            hidden: Some(vec![]),
            activation: Some("leaky_relu".into()),
            rule: Some("inclusive_kl".into()),
            kernel_steps: Some(5),
            step_size: Some(0.05),
            acceptance_target: Some(0.9),
            lr_phi: Some(1e-2),
            lr_theta: Some(1e-2),
            batch_size: Some(100),
            latent_dim: Some(2),
            obs_dim: Some(5),
            obs_noise: Some(0.5),
            data_size: Some(500),
            ..training_defaults()
        },
        Task::KsdEval => RunConfig {
            ..RunConfig::new()
        },
        Task::Lemma1Check => RunConfig {
            seed: Some(0),
            chains: Some(20),
            states: Some(5),
            chain_steps: Some(100),
            ..RunConfig::new()
        },
    };
    cfg.task = Some(task.name().into());
    cfg.out_dir = out_dir;
    cfg
}

/// Overlays every key the user set on the task's defaults.
pub fn resolve(task: Task, user: &RunConfig) -> Result<RunConfig> {
    if let Some(name) = &user.task {
        if name.parse::<Task>()? != task {
            return Err(AmcError::Config(format!(
                "config is for task '{name}' but '{task}' was requested"
            )));
        }
    }
    let mut merged = serde_json::to_value(defaults(task))?;
    if let (Value::Object(base), Value::Object(over)) = (&mut merged, serde_json::to_value(user)?) {
        base.extend(over);
    }
    let mut cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| AmcError::Config(e.to_string()))?;
    cfg.version = CONFIG_VERSION;
    cfg.task = Some(task.name().into());
    Ok(cfg)
}

pub(crate) fn need<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| AmcError::Config(format!("missing config key '{key}'")))
}

/// Output directory of one run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    /// Creates `dir` and writes the config echo into it.
    pub fn create(dir: &Path, resolved: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        resolved.save(&dir.join("config.json"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn subdir(&self, name: &str) -> Result<Artifacts> {
        let dir = self.dir.join(name);
        std::fs::create_dir_all(&dir)?;
        Ok(Artifacts { dir })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        std::fs::write(self.path(name), text)?;
        Ok(())
    }
}

fn open_artifacts(task: Task, user: &RunConfig) -> Result<(RunConfig, Artifacts)> {
    let cfg = resolve(task, user)?;
    let out = need(&cfg.out_dir, "out_dir")?;
    let art = Artifacts::create(Path::new(&out), &cfg)?;
    Ok((cfg, art))
}

/// Parameter initialisation draws from its own stream so it never overlaps the training noise.
pub(crate) fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub fn kernel_config(cfg: &RunConfig) -> Result<KernelConfig> {
    let kernel = KernelConfig {
        steps: need(&cfg.kernel_steps, "kernel_steps")?,
        step_size: need(&cfg.step_size, "step_size")?,
        metropolis_adjust: need(&cfg.metropolis_adjust, "metropolis_adjust")?,
        acceptance_target: cfg.acceptance_target,
        adapt_rate: need(&cfg.adapt_rate, "adapt_rate")?,
        adapt_window: need(&cfg.adapt_window, "adapt_window")?,
    };
    kernel.validate()?;
    Ok(kernel)
}

/// Training settings of a resolved config.
pub fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let rule = UpdateRuleConfig {
        rule: need(&cfg.rule, "rule")?.parse()?,
        beta: need(&cfg.beta, "beta")?,
        generator_loss: need(&cfg.generator_loss, "generator_loss")?.parse()?,
        independent_z0: need(&cfg.independent_z0, "independent_z0")?,
        disc_steps: need(&cfg.disc_steps, "disc_steps")?,
        disc_hidden: need(&cfg.disc_hidden, "disc_hidden")?,
    };
    Ok(TrainConfig {
        iterations: need(&cfg.iterations, "iterations")?,
        particles: need(&cfg.particles, "particles")?,
        kernel: kernel_config(cfg)?,
        rule,
        lr_phi: need(&cfg.lr_phi, "lr_phi")?,
        lr_psi: need(&cfg.lr_psi, "lr_psi")?,
        lr_theta: need(&cfg.lr_theta, "lr_theta")?,
        lr_final_scale: need(&cfg.lr_final_scale, "lr_final_scale")?,
        seed: need(&cfg.seed, "seed")?,
        eval_every: need(&cfg.eval_every, "eval_every")?,
        ksd_samples: need(&cfg.ksd_samples, "ksd_samples")?,
        baseline: Baseline::None,
        persistent: need(&cfg.persistent, "persistent")?,
        record_timing: false,
    })
}

/// Freshly initialised sampler of the configured family for a `dim`-dimensional target.
pub fn build_sampler(cfg: &RunConfig, dim: usize, rng: &mut ChaCha8Rng) -> Result<SamplerSpec> {
    let family: SamplerFamily = need(&cfg.sampler, "sampler")?.parse()?;
    let activation: Activation = need(&cfg.activation, "activation")?.parse()?;
    match family {
        SamplerFamily::MeanFieldGaussian => SamplerSpec::mean_field_gaussian(vec![0.0; dim], vec![0.0; dim]),
        SamplerFamily::VariationalProgram => {
            if dim != 1 {
                return Err(AmcError::Config("the variational program is one-dimensional".into()));
            }
            SamplerSpec::variational_program_random(rng)
        }
        SamplerFamily::ImplicitMlp => SamplerSpec::implicit_mlp(
            need(&cfg.noise_dim, "noise_dim")?,
            &need(&cfg.hidden, "hidden")?,
            dim,
            activation,
            rng,
        ),
        SamplerFamily::DropoutMlp => SamplerSpec::dropout_mlp(
            need(&cfg.noise_dim, "noise_dim")?,
            &need(&cfg.hidden, "hidden")?,
            dim,
            activation,
            0.5,
            rng,
        ),
    }
}

/// Mean and sample standard deviation.
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trailing moving average; entry `i` averages `values[i..i + window]`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(values.len() - window + 1);
    let mut sum: f64 = values[..window].iter().sum();
    out.push(sum / window as f64);
    for i in window..values.len() {
        sum += values[i] - values[i - window];
        out.push(sum / window as f64);
    }
    out
}

/// Result of any task, for printing.
#[derive(Clone, Debug)]
pub enum TaskReport {
    GmmFit(GmmFitReport),
    GmmSweep(SweepReport),
    BnnTrain(BnnReport),
    MleToy(MleToyReport),
    KsdEval(KsdEvalReport),
    Lemma1Check(Lemma1Report),
}

impl fmt::Display for TaskReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskReport::GmmFit(r) => r.fmt(f),
            TaskReport::GmmSweep(r) => r.fmt(f),
            TaskReport::BnnTrain(r) => r.fmt(f),
            TaskReport::MleToy(r) => r.fmt(f),
            TaskReport::KsdEval(r) => r.fmt(f),
            TaskReport::Lemma1Check(r) => r.fmt(f),
        }
    }
}

pub fn run(task: Task, user: &RunConfig) -> Result<TaskReport> {
    Ok(match task {
        Task::GmmFit => TaskReport::GmmFit(gmm_fit(user)?),
        Task::GmmSweep => TaskReport::GmmSweep(gmm_sweep(user)?),
        Task::BnnTrain => TaskReport::BnnTrain(bnn_train(user)?),
        Task::MleToy => TaskReport::MleToy(mle_toy(user)?),
        Task::KsdEval => TaskReport::KsdEval(ksd_eval(user)?),
        Task::Lemma1Check => TaskReport::Lemma1Check(lemma1_check(user)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert_eq!("gmm_fit".parse::<Task>().unwrap(), Task::GmmFit);
        assert!("fit".parse::<Task>().is_err());
    }

    #[test]
    fn user_keys_override_defaults() {
        let user = RunConfig {
            iterations: Some(7),
            lr_phi: Some(0.5),
            ..RunConfig::new()
        };
        let cfg = resolve(Task::GmmFit, &user).unwrap();
        assert_eq!(cfg.iterations, Some(7));
        assert_eq!(cfg.lr_phi, Some(0.5));
        assert_eq!(cfg.kernel_steps, Some(10));
        assert_eq!(cfg.task.as_deref(), Some("gmm-fit"));
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let user = RunConfig {
            task: Some("bnn-train".into()),
            ..RunConfig::new()
        };
        assert!(matches!(resolve(Task::GmmFit, &user), Err(AmcError::Config(_))));
    }

    #[test]
    fn resolved_defaults_round_trip() {
        for t in Task::ALL {
            let cfg = resolve(t, &RunConfig::new()).unwrap();
            assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn training_tasks_build_valid_configs() {
        for t in [Task::GmmFit, Task::GmmSweep, Task::BnnTrain, Task::MleToy] {
            let cfg = resolve(t, &RunConfig::new()).unwrap();
            train_config(&cfg).unwrap();
        }
    }

    #[test]
    fn moving_average_by_hand() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }

    #[test]
    fn incompatible_family_and_rule_fail_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let user = RunConfig {
            sampler: Some("implicit_mlp".into()),
            rule: Some("inclusive_kl".into()),
            out_dir: Some(dir.path().join("x").to_string_lossy().into_owned()),
            ..RunConfig::new()
        };
        assert!(matches!(gmm_fit(&user), Err(AmcError::Config(_))));
        assert!(!dir.path().join("x/ledger.csv").exists());
    }
}
