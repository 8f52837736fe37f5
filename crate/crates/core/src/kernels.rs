//! The teacher: unadjusted and Metropolis-adjusted Langevin transitions.
//!
//! Proposals use `z' = z + (eta / 2) grad log p(z) + sqrt(eta) xi` with
//! `xi ~ N(0, I)`. Each particle owns its own random stream, derived from a
//! seed and the particle index, so a batch evolves identically whether the
//! particles run sequentially or in parallel.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AmcError, Result};
use crate::targets::TargetDensity;
use crate::tensor::Tensor;

pub const MIN_STEP_SIZE: f64 = 1e-8;
pub const MAX_STEP_SIZE: f64 = 1e2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Transitions per teacher call (`T`).
    pub steps: usize,
    /// Langevin step size (`eta`).
    pub step_size: f64,
    pub metropolis_adjust: bool,
    /// Acceptance rate the step size is adapted towards; `None` disables adaptation.
    pub acceptance_target: Option<f64>,
    pub adapt_rate: f64,
    /// Number of recent steps averaged into the reported running acceptance.
    pub adapt_window: usize,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            step_size: 0.1,
            metropolis_adjust: true,
            acceptance_target: None,
            adapt_rate: 0.01,
            adapt_window: 100,
        }
    }
}

impl KernelConfig {
    pub fn mala(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size,
            ..Self::default()
        }
    }

    pub fn ula(steps: usize, step_size: f64) -> Self {
        Self {
            steps,
            step_size,
            metropolis_adjust: false,
            ..Self::default()
        }
    }

    pub fn with_acceptance_target(mut self, target: f64) -> Self {
        self.acceptance_target = Some(target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(AmcError::Config("kernel steps must be >= 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(AmcError::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if let Some(t) = self.acceptance_target {
            if !(t > 0.0 && t <= 1.0) {
                return Err(AmcError::Config(format!(
                    "acceptance target must lie in (0, 1], got {t}"
                )));
            }
        }
        if !(self.adapt_rate >= 0.0) {
            return Err(AmcError::Config("adapt rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    StudentInitial,
    TeacherEvolved,
}

/// `K` particles in `R^d`, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    particles: Tensor,
    provenance: Provenance,
    /// Seed of the random streams that produced this batch, when known.
    pub rng_seed_trace: Option<u64>,
}

impl SampleBatch {
    pub fn new(particles: Tensor, provenance: Provenance) -> Result<Self> {
        if particles.shape().len() != 2 || particles.rows() < 1 {
            return Err(AmcError::Contract(format!(
                "a sample batch needs shape [K >= 1, d], got {:?}",
                particles.shape()
            )));
        }
        if !particles.all_finite() {
            return Err(AmcError::NonFinite("sample batch contains non-finite entries".into()));
        }
        Ok(Self {
            particles,
            provenance,
            rng_seed_trace: None,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], provenance: Provenance) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?, provenance)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed_trace = Some(seed);
        self
    }

    pub fn particles(&self) -> &Tensor {
        &self.particles
    }

    pub fn into_particles(self) -> Tensor {
        self.particles
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.particles.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.particles.cols()
    }

    pub fn particle(&self, k: usize) -> &[f64] {
        self.particles.row(k)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.len()).map(move |k| self.particle(k))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.iter().map(|p| p[j]).collect()
    }
}

/// Independent per-particle random streams.
#[derive(Clone, Debug)]
pub struct ParticleStreams {
    seed: u64,
    rngs: Vec<ChaCha8Rng>,
}

impl ParticleStreams {
    pub fn new(seed: u64, particles: usize) -> Self {
        let rngs = (0..particles)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                rng
            })
            .collect();
        Self { seed, rngs }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.rngs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rngs.is_empty()
    }

    pub fn stream_mut(&mut self, k: usize) -> &mut ChaCha8Rng {
        &mut self.rngs[k]
    }
}

fn check_grad(grad: &[f64], z: &[f64], particle: usize) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AmcError::Kernel {
            particle,
            message: "non-finite gradient of log density".into(),
            z: z.to_vec(),
        });
    }
    Ok(())
}

fn propose(z: &[f64], grad: &[f64], eta: f64, noise: &[f64]) -> Vec<f64> {
    let scale = eta.sqrt();
    z.iter()
        .zip(grad)
        .zip(noise)
        .map(|((z, g), n)| z + 0.5 * eta * g + scale * n)
        .collect()
}

/// One Langevin proposal with caller-supplied standard normal `noise`.
pub fn langevin_proposal<T: TargetDensity + ?Sized>(
    z: &[f64],
    target: &T,
    eta: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let grad = target.grad_log_density(z);
    check_grad(&grad, z, 0)?;
    Ok(propose(z, &grad, eta, noise))
}

/// `log k(to | from)` up to a constant shared by both directions.
fn log_transition(to: &[f64], from: &[f64], grad_from: &[f64], eta: f64) -> f64 {
    let sq: f64 = to
        .iter()
        .zip(from)
        .zip(grad_from)
        .map(|((t, f), g)| (t - f - 0.5 * eta * g).powi(2))
        .sum();
    -sq / (2.0 * eta)
}

fn log_accept(
    logp: f64,
    grad: &[f64],
    z: &[f64],
    logp_new: f64,
    grad_new: &[f64],
    z_new: &[f64],
    eta: f64,
) -> f64 {
    let forward = log_transition(z_new, z, grad, eta);
    let backward = log_transition(z, z_new, grad_new, eta);
    let ratio = logp_new + backward - logp - forward;
    if ratio.is_nan() {
        f64::NEG_INFINITY
    } else {
        ratio.min(0.0)
    }
}

/// Log Metropolis-Hastings acceptance probability for moving `z -> z_new`.
pub fn mala_log_alpha<T: TargetDensity + ?Sized>(
    target: &T,
    z: &[f64],
    z_new: &[f64],
    eta: f64,
) -> f64 {
    let (lp, g) = target.value_and_grad(z);
    let (lp_new, g_new) = target.value_and_grad(z_new);
    log_accept(lp, &g, z, lp_new, &g_new, z_new, eta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MalaOutcome {
    pub z: Vec<f64>,
    pub accepted: bool,
    pub log_alpha: f64,
}

/// Cached state of one particle: position, log density and its gradient.
#[derive(Clone, Debug)]
struct ParticleState {
    z: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

impl ParticleState {
    fn new<T: TargetDensity + ?Sized>(z: Vec<f64>, target: &T, particle: usize) -> Result<Self> {
        let (logp, grad) = target.value_and_grad(&z);
        check_grad(&grad, &z, particle)?;
        Ok(Self { z, logp, grad })
    }

    fn step<T: TargetDensity + ?Sized, R: Rng + ?Sized>(
        &mut self,
        target: &T,
        eta: f64,
        metropolis: bool,
        rng: &mut R,
        particle: usize,
    ) -> Result<(bool, f64)> {
        let noise: Vec<f64> = (0..self.z.len()).map(|_| rng.sample(StandardNormal)).collect();
        let z_new = propose(&self.z, &self.grad, eta, &noise);
        let (logp_new, grad_new) = target.value_and_grad(&z_new);
        if !metropolis {
            check_grad(&grad_new, &z_new, particle)?;
            self.z = z_new;
            self.logp = logp_new;
            self.grad = grad_new;
            return Ok((true, 0.0));
        }
        let u: f64 = rng.random();
        let proposal_ok = logp_new.is_finite() && grad_new.iter().all(|g| g.is_finite());
        let log_alpha = if proposal_ok {
            log_accept(self.logp, &self.grad, &self.z, logp_new, &grad_new, &z_new, eta)
        } else {
            f64::NEG_INFINITY
        };
        let accepted = u.ln() < log_alpha;
        if accepted {
            self.z = z_new;
            self.logp = logp_new;
            self.grad = grad_new;
        }
        Ok((accepted, log_alpha))
    }
}

/// One MALA (or ULA, when `metropolis` is false) transition from `z`.
pub fn mala_step<T: TargetDensity + ?Sized, R: Rng + ?Sized>(
    z: &[f64],
    target: &T,
    eta: f64,
    metropolis: bool,
    rng: &mut R,
) -> Result<MalaOutcome> {
    let mut state = ParticleState::new(z.to_vec(), target, 0)?;
    let (accepted, log_alpha) = state.step(target, eta, metropolis, rng, 0)?;
    Ok(MalaOutcome {
        z: state.z,
        accepted,
        log_alpha,
    })
}

/// Result of evolving a batch for `T` steps.
#[derive(Clone, Debug)]
pub struct ChainRun {
    pub batch: SampleBatch,
    /// Accepted transitions over all particles and steps.
    pub acceptance_rate: f64,
    pub accepted_per_particle: Vec<usize>,
}

/// One row of an optional chain trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub particle: usize,
    pub z: Vec<f64>,
    pub accepted: bool,
}

type ParticleResult = Result<(Vec<f64>, usize, Vec<TraceRow>)>;

fn evolve_particle<T: TargetDensity + ?Sized>(
    z: Vec<f64>,
    target: &T,
    config: &KernelConfig,
    rng: &mut ChaCha8Rng,
    particle: usize,
    trace: bool,
) -> ParticleResult {
    let mut state = ParticleState::new(z, target, particle)?;
    let mut accepted = 0;
    let mut rows = Vec::new();
    for step in 0..config.steps {
        let (acc, _) = state.step(target, config.step_size, config.metropolis_adjust, rng, particle)?;
        accepted += usize::from(acc);
        if trace {
            rows.push(TraceRow {
                step: step + 1,
                particle,
                z: state.z.clone(),
                accepted: acc,
            });
        }
    }
    Ok((state.z, accepted, rows))
}

fn evolve<'a, F>(
    batch: &SampleBatch,
    config: &KernelConfig,
    target_of: F,
    streams: &mut ParticleStreams,
    trace: bool,
) -> Result<(ChainRun, Vec<TraceRow>)>
where
    F: Fn(usize) -> &'a (dyn TargetDensity + 'a) + Sync,
{
    config.validate()?;
    let k = batch.len();
    if streams.len() != k {
        return Err(AmcError::Contract(format!(
            "{} random streams for {k} particles",
            streams.len()
        )));
    }
    for i in 0..k {
        let t = target_of(i);
        if t.dim() != batch.dim() {
            return Err(AmcError::dimension("particle vs target", &[t.dim()], &[batch.dim()]));
        }
    }
    let work: Vec<(usize, Vec<f64>, &mut ChaCha8Rng)> = streams
        .rngs
        .iter_mut()
        .enumerate()
        .map(|(i, rng)| (i, batch.particle(i).to_vec(), rng))
        .collect();

    let run = |(i, z, rng): (usize, Vec<f64>, &mut ChaCha8Rng)| {
        evolve_particle(z, target_of(i), config, rng, i, trace)
    };

    #[cfg(feature = "parallel")]
    let results: Vec<ParticleResult> = {
        use rayon::prelude::*;
        work.into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<ParticleResult> = work.into_iter().map(run).collect();

    let mut rows = Vec::with_capacity(k);
    let mut accepted = Vec::with_capacity(k);
    let mut traces = Vec::new();
    for r in results {
        let (z, acc, t) = r?;
        rows.push(z);
        accepted.push(acc);
        traces.extend(t);
    }
    traces.sort_by_key(|r| (r.step, r.particle));
    let total: usize = accepted.iter().sum();
    let batch = SampleBatch::new(Tensor::from_rows(&rows)?, Provenance::TeacherEvolved)
        .map_err(|e| AmcError::Kernel {
            particle: 0,
            message: e.to_string(),
            z: vec![],
        })?
        .with_seed(streams.seed);
    Ok((
        ChainRun {
            batch,
            acceptance_rate: total as f64 / (k * config.steps) as f64,
            accepted_per_particle: accepted,
        },
        traces,
    ))
}

fn require_student(batch: &SampleBatch) -> Result<()> {
    if batch.provenance() != Provenance::StudentInitial {
        return Err(AmcError::Contract(
            "teacher chains must start from student samples".into(),
        ));
    }
    Ok(())
}

/// `K_T` applied to a fresh student batch.
pub fn run_chain<T: TargetDensity + ?Sized>(
    batch: &SampleBatch,
    config: &KernelConfig,
    target: &T,
    streams: &mut ParticleStreams,
) -> Result<ChainRun> {
    require_student(batch)?;
    let target: &dyn TargetDensity = &target;
    Ok(evolve(batch, config, |_| target, streams, false)?.0)
}

/// Like [`run_chain`] but also returns every intermediate state.
pub fn run_chain_traced<T: TargetDensity + ?Sized>(
    batch: &SampleBatch,
    config: &KernelConfig,
    target: &T,
    streams: &mut ParticleStreams,
) -> Result<(ChainRun, Vec<TraceRow>)> {
    require_student(batch)?;
    let target: &dyn TargetDensity = &target;
    evolve(batch, config, |_| target, streams, true)
}

/// Continues chains from any batch, including one the teacher already evolved.
pub fn continue_chain<T: TargetDensity + ?Sized>(
    batch: &SampleBatch,
    config: &KernelConfig,
    target: &T,
    streams: &mut ParticleStreams,
) -> Result<ChainRun> {
    let target: &dyn TargetDensity = &target;
    Ok(evolve(batch, config, |_| target, streams, false)?.0)
}

/// Evolves particle `k` under `targets[k]` (one posterior per observation).
pub fn run_chain_conditional(
    batch: &SampleBatch,
    config: &KernelConfig,
    targets: &[&dyn TargetDensity],
    streams: &mut ParticleStreams,
) -> Result<ChainRun> {
    require_student(batch)?;
    if targets.len() != batch.len() {
        return Err(AmcError::Contract(format!(
            "{} targets for {} particles",
            targets.len(),
            batch.len()
        )));
    }
    Ok(evolve(batch, config, |k| targets[k], streams, false)?.0)
}

/// Log-space Robbins-Monro update of the step size towards the acceptance target.
pub fn adapt_step_size(config: &KernelConfig, recent_acceptance: f64) -> KernelConfig {
    let mut next = config.clone();
    if let Some(target) = config.acceptance_target {
        let eta = config.step_size * (config.adapt_rate * (recent_acceptance - target)).exp();
        next.step_size = eta.clamp(MIN_STEP_SIZE, MAX_STEP_SIZE);
    }
    next
}

/// Rolling mean of the most recent acceptance rates.
#[derive(Clone, Debug)]
pub struct AcceptanceWindow {
    capacity: usize,
    values: VecDeque<f64>,
    sum: f64,
}

impl AcceptanceWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            values: VecDeque::new(),
            sum: 0.0,
        }
    }

    pub fn push(&mut self, rate: f64) {
        self.values.push_back(rate);
        self.sum += rate;
        if self.values.len() > self.capacity {
            self.sum -= self.values.pop_front().unwrap_or(0.0);
        }
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.sum / self.values.len() as f64)
        }
    }

    pub fn is_full(&self) -> bool {
        self.values.len() == self.capacity
    }
}

/// Trace of a single-step-adapted MALA run.
#[derive(Clone, Debug)]
pub struct AdaptiveRun {
    pub batch: SampleBatch,
    pub config: KernelConfig,
    pub step_sizes: Vec<f64>,
    /// Window-averaged acceptance after each step.
    pub running_acceptance: Vec<f64>,
}

/// Runs `steps` one-step transitions, adapting the step size after each one
/// from that step's acceptance rate across particles.
pub fn run_adaptive<T: TargetDensity + ?Sized>(
    batch: &SampleBatch,
    config: &KernelConfig,
    target: &T,
    steps: usize,
    streams: &mut ParticleStreams,
) -> Result<AdaptiveRun> {
    let mut cfg = config.clone();
    cfg.steps = 1;
    let mut window = AcceptanceWindow::new(config.adapt_window);
    let mut current = batch.clone();
    let mut step_sizes = Vec::with_capacity(steps);
    let mut running = Vec::with_capacity(steps);
    for _ in 0..steps {
        let run = continue_chain(&current, &cfg, target, streams)?;
        window.push(run.acceptance_rate);
        cfg = adapt_step_size(&cfg, run.acceptance_rate);
        step_sizes.push(cfg.step_size);
        running.push(window.mean().unwrap_or(0.0));
        current = run.batch;
    }
    cfg.steps = config.steps;
    Ok(AdaptiveRun {
        batch: current,
        config: cfg,
        step_sizes,
        running_acceptance: running,
    })
}

/// Writes `step,particle,z0..,accepted` rows.
pub fn write_trace_csv<W: Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = rows.first().map(|r| r.z.len()).unwrap_or(0);
    let mut header = vec!["step".to_string(), "particle".to_string()];
    header.extend((0..d).map(|j| format!("z{j}")));
    header.push("accepted".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.particle.to_string()];
        rec.extend(r.z.iter().map(|v| v.to_string()));
        rec.push(u8::from(r.accepted).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
