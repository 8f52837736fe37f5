//! The amortisation loop: sample from the student, improve the samples with
//! the teacher, then pull the student towards the improved samples.

mod mle;
mod vi;

pub use mle::{
    fit_generative, procrustes_relative_error, theta_step, GaussianEncoder, GenerativeModel,
    LatentPosterior, MleConfig, MleOutcome,
};
pub use vi::{elbo_estimate, vi_baseline_fit, ViConfig, ViOutcome};

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::diagnostics::{ksd, KsdConfig};
use crate::error::{AmcError, Result};
use crate::kernels::{
    adapt_step_size, continue_chain, run_chain, AcceptanceWindow, ChainRun, KernelConfig,
    ParticleStreams, Provenance, SampleBatch,
};
use crate::optim::Adam;
use crate::samplers::SamplerSpec;
use crate::targets::{BnnPosterior, TargetDensity};
use crate::update_rules::{
    adversarial_js_losses, energy_matching_loss, inclusive_kl_loss, Discriminator, Rule,
    UpdateRuleConfig,
};

/// Offset mixed into the seed of the evaluation stream so evaluation never
/// consumes training randomness.
const EVAL_STREAM: u64 = 0x5eed_e7a1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    ViMeanfield,
    McmcOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Student batch size `K`, one chain per particle.
    pub particles: usize,
    pub kernel: KernelConfig,
    pub rule: UpdateRuleConfig,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub lr_theta: f64,
    /// Student and critic learning rates decay linearly to this fraction of
    /// their initial values over the run; 1 keeps them constant.
    #[serde(default = "unit_scale")]
    pub lr_final_scale: f64,
    pub seed: u64,
    /// KSD evaluation period in iterations; 0 disables it.
    pub eval_every: usize,
    /// Student samples drawn for each KSD evaluation.
    pub ksd_samples: usize,
    pub baseline: Baseline,
    /// Keep chain state across iterations instead of restarting from the student.
    pub persistent: bool,
    /// Record wall-clock milliseconds in the ledger (breaks byte-identical ledgers).
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            particles: 10,
            kernel: KernelConfig::default(),
            rule: UpdateRuleConfig::default(),
            lr_phi: 1e-3,
            lr_psi: 1e-3,
            lr_theta: 1e-3,
            lr_final_scale: 1.0,
            seed: 0,
            eval_every: 0,
            ksd_samples: 500,
            baseline: Baseline::None,
            persistent: false,
            record_timing: false,
        }
    }
}

fn unit_scale() -> f64 {
    1.0
}

impl TrainConfig {
    /// Copy with the student and critic rates set for iteration `it`.
    pub fn at_iteration(&self, it: usize) -> TrainConfig {
        let mut out = self.clone();
        if self.lr_final_scale != 1.0 && self.iterations > 1 {
            let progress = it.min(self.iterations - 1) as f64 / (self.iterations - 1) as f64;
            let scale = 1.0 + (self.lr_final_scale - 1.0) * progress;
            out.lr_phi *= scale;
            out.lr_psi *= scale;
        }
        out
    }

    pub fn validate(&self, spec: &SamplerSpec) -> Result<()> {
        for (name, lr) in [("lr_phi", self.lr_phi), ("lr_psi", self.lr_psi), ("lr_theta", self.lr_theta)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(AmcError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.lr_final_scale > 0.0 && self.lr_final_scale <= 1.0) {
            return Err(AmcError::Config(format!(
                "lr_final_scale must lie in (0, 1], got {}",
                self.lr_final_scale
            )));
        }
        if self.particles < 1 {
            return Err(AmcError::Config("need at least one particle".into()));
        }
        if spec.ensemble_normalized && self.particles < 2 {
            return Err(AmcError::Config(
                "ensemble normalisation needs at least two particles".into(),
            ));
        }
        if self.eval_every > 0 && self.ksd_samples < 2 {
            return Err(AmcError::Config("KSD evaluation needs ksd_samples >= 2".into()));
        }
        if self.baseline == Baseline::ViMeanfield && !spec.density_tractable() {
            return Err(AmcError::Config("the VI baseline needs a tractable Gaussian".into()));
        }
        self.kernel.validate()?;
        self.rule.validate(spec)?;
        spec.validate()
    }
}

/// One row of the run ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub iteration: usize,
    pub rule: String,
    pub rule_loss: f64,
    pub disc_loss: Option<f64>,
    pub ksd: Option<f64>,
    pub acceptance_rate: f64,
    pub eta: f64,
    pub wall_ms: u64,
}

pub const LEDGER_HEADER: [&str; 8] = [
    "iteration",
    "rule",
    "rule_loss",
    "disc_loss",
    "ksd",
    "acceptance_rate",
    "eta",
    "wall_ms",
];

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl LedgerRecord {
    fn fields(&self) -> [String; 8] {
        [
            self.iteration.to_string(),
            self.rule.clone(),
            self.rule_loss.to_string(),
            opt(self.disc_loss),
            opt(self.ksd),
            self.acceptance_rate.to_string(),
            self.eta.to_string(),
            self.wall_ms.to_string(),
        ]
    }
}

/// Append-only per-iteration records, optionally streamed to a CSV file as they arrive.
#[derive(Debug, Default)]
pub struct RunLedger {
    records: Vec<LedgerRecord>,
    sink: Option<csv::Writer<File>>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// A ledger that writes the header now and flushes every record to `path`.
    pub fn streaming(path: &Path) -> Result<Self> {
        let mut w = csv::Writer::from_writer(File::create(path)?);
        w.write_record(LEDGER_HEADER)?;
        w.flush()?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(w),
        })
    }

    pub fn push(&mut self, record: LedgerRecord) -> Result<()> {
        if let Some(w) = self.sink.as_mut() {
            w.write_record(record.fields())?;
            w.flush()?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_ksd(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.ksd)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(LEDGER_HEADER)?;
        for r in &self.records {
            w.write_record(r.fields())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Where each iteration's target comes from.
#[derive(Clone, Copy)]
pub enum TargetSource<'a> {
    Fixed(&'a dyn TargetDensity),
    /// Fresh minibatch of the posterior's data every iteration, likelihood rescaled.
    Minibatch { posterior: &'a BnnPosterior, batch_size: usize },
}

impl<'a> TargetSource<'a> {
    pub fn fixed<T: TargetDensity>(target: &'a T) -> Self {
        TargetSource::Fixed(target)
    }

    /// Target used for evaluation: the full posterior.
    pub fn full(&self) -> &'a dyn TargetDensity {
        match *self {
            TargetSource::Fixed(t) => t,
            TargetSource::Minibatch { posterior, .. } => posterior,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Option<BnnPosterior>> {
        match *self {
            TargetSource::Fixed(_) => Ok(None),
            TargetSource::Minibatch { posterior, batch_size } => {
                if batch_size >= posterior.len() {
                    return Ok(None);
                }
                let idx = rand::seq::index::sample(rng, posterior.len(), batch_size).into_vec();
                Ok(Some(posterior.minibatch(&idx)?))
            }
        }
    }
}

/// Mutable training state carried between iterations.
#[derive(Clone, Debug)]
pub struct AmcState {
    pub spec: SamplerSpec,
    pub disc: Option<Discriminator>,
    pub kernel: KernelConfig,
    pub iteration: usize,
    phi_opt: Adam,
    psi_opt: Adam,
    rng: ChaCha8Rng,
    window: AcceptanceWindow,
    /// Chain state, kept only in persistent mode.
    chains: Option<(SampleBatch, ParticleStreams)>,
}

impl AmcState {
    pub fn new(spec: SamplerSpec, config: &TrainConfig) -> Result<Self> {
        config.validate(&spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let disc = if config.rule.rule == Rule::AdversarialJs {
            Some(Discriminator::new(spec.output_dim, &config.rule.disc_hidden, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            spec,
            disc,
            kernel: config.kernel.clone(),
            iteration: 0,
            phi_opt: Adam::new(),
            psi_opt: Adam::new(),
            rng,
            window: AcceptanceWindow::new(config.kernel.adapt_window),
            chains: None,
        })
    }

    /// Window-averaged acceptance rate of recent teacher calls.
    pub fn running_acceptance(&self) -> Option<f64> {
        self.window.mean()
    }

    pub fn has_chain_state(&self) -> bool {
        self.chains.is_some()
    }

    fn teacher(&mut self, z0: &SampleBatch, target: &dyn TargetDensity, persistent: bool) -> Result<ChainRun> {
        let k = z0.len();
        if persistent {
            if let Some((prev, mut streams)) = self.chains.take() {
                let run = continue_chain(&prev, &self.kernel, target, &mut streams)?;
                self.chains = Some((run.batch.clone(), streams));
                return Ok(run);
            }
            let mut streams = ParticleStreams::new(self.rng.random(), k);
            let run = run_chain(z0, &self.kernel, target, &mut streams)?;
            self.chains = Some((run.batch.clone(), streams));
            return Ok(run);
        }
        let mut streams = ParticleStreams::new(self.rng.random(), k);
        run_chain(z0, &self.kernel, target, &mut streams)
    }
}

/// One projected fixed-point step: student sample, teacher evolution, divergence update.
pub fn amc_step(state: &mut AmcState, source: &TargetSource<'_>, config: &TrainConfig) -> Result<LedgerRecord> {
    // Instant::now panics on wasm32, so only touch the clock when asked to
    let started = config.record_timing.then(Instant::now);
    let iteration = state.iteration;
    let result = amc_step_inner(state, source, config);
    let (rule_loss, disc_loss, acceptance) = result.map_err(|e| e.at_iteration(iteration))?;
    state.iteration += 1;
    Ok(LedgerRecord {
        iteration,
        rule: config.rule.rule.name().to_string(),
        rule_loss,
        disc_loss,
        ksd: None,
        acceptance_rate: acceptance,
        eta: state.kernel.step_size,
        wall_ms: started.map_or(0, |t| t.elapsed().as_millis() as u64),
    })
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AmcError::NonFinite(format!("{what} is {value}")))
    }
}

fn amc_step_inner(
    state: &mut AmcState,
    source: &TargetSource<'_>,
    config: &TrainConfig,
) -> Result<(f64, Option<f64>, f64)> {
    let k = config.particles;
    let minibatch = source.draw(&mut state.rng)?;
    let target: &dyn TargetDensity = match &minibatch {
        Some(t) => t,
        None => source.full(),
    };
    let noise = state.spec.draw_noise(k, &mut state.rng)?;
    let z0 = SampleBatch::new(state.spec.warp_values(&noise)?, Provenance::StudentInitial)?;
    let run = state.teacher(&z0, target, config.persistent)?;
    let z_t = run.batch;
    state.window.push(run.acceptance_rate);

    let mut disc_loss = None;
    if let (Rule::AdversarialJs, Some(disc)) = (config.rule.rule, state.disc.as_mut()) {
        // Critic first, so the generator sees the fresher critic.
        for _ in 0..config.rule.disc_steps {
            let tape = Tape::new();
            let psi = tape.bind(&disc.params);
            let z0v = tape.leaf(z0.particles().clone());
            let l = adversarial_js_losses(&tape, z0v, &z_t, disc, &psi, config.rule.generator_loss)?;
            let grads = tape.grad(l.disc_loss, &psi)?;
            disc.params = state.psi_opt.step(&disc.params, &grads, config.lr_psi)?;
            disc_loss = Some(check_finite(l.disc_loss.item()?, "discriminator loss")?);
        }
    }

    let gen_noise = if config.rule.independent_z0 {
        state.spec.draw_noise(k, &mut state.rng)?
    } else {
        noise
    };
    let tape = Tape::new();
    let phi = tape.bind(&state.spec.params);
    let loss = match config.rule.rule {
        Rule::InclusiveKl => inclusive_kl_loss(&tape, &state.spec, &phi, &z_t)?,
        Rule::EnergyMatching => {
            let z0v = state.spec.warp(&tape, &phi, &gen_noise)?;
            energy_matching_loss(&tape, z0v, &z_t, target, config.rule.beta)?
        }
        Rule::AdversarialJs => {
            let disc = state.disc.as_ref().expect("adversarial state has a critic");
            let psi = tape.bind(&disc.params);
            let z0v = state.spec.warp(&tape, &phi, &gen_noise)?;
            adversarial_js_losses(&tape, z0v, &z_t, disc, &psi, config.rule.generator_loss)?.gen_loss
        }
    };
    let rule_loss = check_finite(loss.item()?, "rule loss")?;
    let grads = tape.grad(loss, &phi)?;
    state.spec.params = state.phi_opt.step(&state.spec.params, &grads, config.lr_phi)?;

    if config.kernel.acceptance_target.is_some() {
        state.kernel = adapt_step_size(&state.kernel, run.acceptance_rate);
    }
    Ok((rule_loss, disc_loss, run.acceptance_rate))
}

/// Samples used for evaluation; the same noise is drawn at every evaluation.
pub fn evaluation_samples(spec: &SamplerSpec, config: &TrainConfig) -> Result<SampleBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ EVAL_STREAM);
    spec.sample(config.ksd_samples, &mut rng)
}

pub fn evaluate_ksd(spec: &SamplerSpec, target: &dyn TargetDensity, config: &TrainConfig) -> Result<f64> {
    ksd(&evaluation_samples(spec, config)?, target, &KsdConfig::default())
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub spec: SamplerSpec,
    pub disc: Option<Discriminator>,
    pub kernel: KernelConfig,
    /// Final chain state for persistent and chain-only runs.
    pub chains: Option<SampleBatch>,
    pub initial_ksd: Option<f64>,
    pub final_ksd: Option<f64>,
}

/// Runs the configured number of iterations, appending to `ledger` as it goes.
/// On error the ledger keeps every record written before the failure.
pub fn fit(
    config: &TrainConfig,
    source: TargetSource<'_>,
    spec: SamplerSpec,
    ledger: &mut RunLedger,
) -> Result<FitOutcome> {
    config.validate(&spec)?;
    match config.baseline {
        Baseline::None => fit_amc(config, source, spec, ledger),
        Baseline::ViMeanfield => {
            let vi = ViConfig {
                iterations: config.iterations,
                samples: config.particles,
                lr: config.lr_phi,
                seed: config.seed,
            };
            let out = vi_baseline_fit(spec, source, &vi)?;
            for (i, elbo) in out.elbo_trace.iter().enumerate() {
                ledger.push(LedgerRecord {
                    iteration: i,
                    rule: "vi_elbo".into(),
                    rule_loss: -elbo,
                    disc_loss: None,
                    ksd: None,
                    acceptance_rate: 0.0,
                    eta: 0.0,
                    wall_ms: 0,
                })?;
            }
            Ok(FitOutcome {
                spec: out.spec,
                disc: None,
                kernel: config.kernel.clone(),
                chains: None,
                initial_ksd: None,
                final_ksd: None,
            })
        }
        Baseline::McmcOnly => fit_chains_only(config, source, spec, ledger),
    }
}

fn fit_amc(
    config: &TrainConfig,
    source: TargetSource<'_>,
    spec: SamplerSpec,
    ledger: &mut RunLedger,
) -> Result<FitOutcome> {
    let evaluating = config.eval_every > 0;
    let initial_ksd = if evaluating {
        Some(evaluate_ksd(&spec, source.full(), config)?)
    } else {
        None
    };
    let mut state = AmcState::new(spec, config)?;
    let mut final_ksd = initial_ksd;
    for it in 0..config.iterations {
        let mut record = amc_step(&mut state, &source, &config.at_iteration(it))?;
        let last = it + 1 == config.iterations;
        if evaluating && ((it + 1) % config.eval_every == 0 || last) {
            let v = evaluate_ksd(&state.spec, source.full(), config).map_err(|e| e.at_iteration(it))?;
            record.ksd = Some(v);
            final_ksd = Some(v);
        }
        ledger.push(record)?;
    }
    Ok(FitOutcome {
        chains: state.chains.as_ref().map(|(b, _)| b.clone()),
        spec: state.spec,
        disc: state.disc,
        kernel: state.kernel,
        initial_ksd,
        final_ksd,
    })
}

/// Chains started once from the student and never restarted; the student is not trained.
fn fit_chains_only(
    config: &TrainConfig,
    source: TargetSource<'_>,
    spec: SamplerSpec,
    ledger: &mut RunLedger,
) -> Result<FitOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = spec.sample(config.particles, &mut rng)?;
    let mut streams = ParticleStreams::new(rng.random(), config.particles);
    let mut kernel = config.kernel.clone();
    let mut first = true;
    for it in 0..config.iterations {
        let minibatch = source.draw(&mut rng)?;
        let target: &dyn TargetDensity = match &minibatch {
            Some(t) => t,
            None => source.full(),
        };
        let run = if first {
            run_chain(&current, &kernel, target, &mut streams)
        } else {
            continue_chain(&current, &kernel, target, &mut streams)
        }
        .map_err(|e| e.at_iteration(it))?;
        first = false;
        if kernel.acceptance_target.is_some() {
            kernel = adapt_step_size(&kernel, run.acceptance_rate);
        }
        ledger.push(LedgerRecord {
            iteration: it,
            rule: "mcmc_only".into(),
            rule_loss: 0.0,
            disc_loss: None,
            ksd: None,
            acceptance_rate: run.acceptance_rate,
            eta: kernel.step_size,
            wall_ms: 0,
        })?;
        current = run.batch;
    }
    Ok(FitOutcome {
        spec,
        disc: None,
        kernel,
        chains: Some(current),
        initial_ksd: None,
        final_ksd: None,
    })
}
