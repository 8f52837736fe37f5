//! Approximate maximum likelihood for latent-variable models: an amortised
//! encoder proposes `z0 ~ q(z | x)`, MALA refines it towards `p(z | x, theta)`,
//! the encoder is fitted to the refined samples and `theta` ascends
//! `E[log p(x | z_T, theta)]`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LedgerRecord, RunLedger};
use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{AmcError, Result};
use crate::kernels::{
    adapt_step_size, run_chain_conditional, KernelConfig, ParticleStreams, Provenance,
    SampleBatch,
};
use crate::nn::{forward_mlp, init_mlp, Activation};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::targets::TargetDensity;
use crate::tensor::Tensor;

/// Decoder `p(x | z, theta) = N(x; f_theta(z), s^2 I)` with prior `p(z) = N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeModel {
    pub theta: ParamSet,
    /// `[latent, hidden.., obs]`; two entries make the decoder linear.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub obs_noise_std: f64,
}

impl GenerativeModel {
    pub fn new<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        activation: Activation,
        obs_noise_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(obs_noise_std > 0.0) {
            return Err(AmcError::Config("observation noise must be positive".into()));
        }
        Ok(Self {
            theta: init_mlp(layer_sizes, rng)?,
            layer_sizes: layer_sizes.to_vec(),
            activation,
            obs_noise_std,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn obs_dim(&self) -> usize {
        *self.layer_sizes.last().expect("layer sizes are non-empty")
    }

    /// Per-row `log p(x_n | z_n, theta)` as a `[K, 1]` node.
    pub fn log_likelihood_var<'t>(
        &self,
        tape: &'t Tape,
        theta: &BoundParams<'t>,
        z: Var<'t>,
        x: &Tensor,
    ) -> Result<Var<'t>> {
        let mean = forward_mlp(theta, &self.layer_sizes, self.activation, z)?;
        let resid = mean.sub(tape.leaf(x.clone()))?;
        let s2 = self.obs_noise_std * self.obs_noise_std;
        let norm = -0.5 * self.obs_dim() as f64 * (2.0 * PI * s2).ln();
        Ok(resid.mul(resid)?.row_sum().scale(-0.5 / s2).add_scalar(norm))
    }

    pub fn log_likelihood(&self, z: &[f64], x: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let theta = tape.bind(&self.theta);
        let zv = tape.leaf(Tensor::matrix(1, z.len(), z.to_vec())?);
        self.log_likelihood_var(&tape, &theta, zv, &Tensor::matrix(1, x.len(), x.to_vec())?)?
            .item()
    }

    /// Posterior `p(z | x, theta)` of one observation, up to a constant.
    pub fn posterior<'a>(&'a self, x: &[f64]) -> LatentPosterior<'a> {
        LatentPosterior {
            model: self,
            x: x.to_vec(),
        }
    }

    /// Gradient of `-mean_k log p(x_k | z_k, theta)` with respect to `theta`, and the mean.
    pub fn theta_gradient(&self, z: &SampleBatch, x: &Tensor) -> Result<(ParamSet, f64)> {
        if z.len() != x.rows() {
            return Err(AmcError::dimension("latent batch", &[x.rows()], &[z.len()]));
        }
        let tape = Tape::new();
        let theta = tape.bind(&self.theta);
        let zv = tape.leaf(z.particles().clone());
        let objective = self.log_likelihood_var(&tape, &theta, zv, x)?.mean();
        let value = objective.item()?;
        Ok((tape.grad(objective.neg(), &theta)?, value))
    }
}

pub struct LatentPosterior<'a> {
    model: &'a GenerativeModel,
    x: Vec<f64>,
}

impl LatentPosterior<'_> {
    fn evaluate(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let theta = tape.bind(&self.model.theta);
        let zv = tape.leaf(Tensor::matrix(1, z.len(), z.to_vec())?);
        let x = Tensor::matrix(1, self.x.len(), self.x.clone())?;
        let prior = zv.mul(zv)?.sum().scale(-0.5);
        let lp = self.model.log_likelihood_var(&tape, &theta, zv, &x)?.sum().add(prior)?;
        let g = tape.backward(lp)?.get(zv).into_values();
        Ok((lp.item()?, g))
    }
}

impl TargetDensity for LatentPosterior<'_> {
    fn dim(&self) -> usize {
        self.model.latent_dim()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.value_and_grad(z).0
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        self.value_and_grad(z).1
    }

    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        self.evaluate(z).expect("latent vector matches the decoder input")
    }
}

/// Amortised `q(z | x) = N(x A + c, diag(exp(2 s)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEncoder {
    pub params: ParamSet,
}

impl GaussianEncoder {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let w: Vec<f64> = (0..obs_dim * latent_dim)
            .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let params = ParamSet::new()
            .with("enc.weight", Tensor::matrix(obs_dim, latent_dim, w)?)?
            .with("enc.bias", Tensor::zeros(&[latent_dim]))?
            .with("enc.log_std", Tensor::zeros(&[latent_dim]))?;
        Ok(Self { params })
    }

    pub fn latent_dim(&self) -> usize {
        self.params.get("enc.bias").map(|b| b.numel()).unwrap_or(0)
    }

    fn mean_var<'t>(&self, tape: &'t Tape, phi: &BoundParams<'t>, x: &Tensor) -> Result<Var<'t>> {
        tape.leaf(x.clone()).matmul(phi.get("enc.weight")?)?.add_bias(phi.get("enc.bias")?)
    }

    /// `z = mean(x) + exp(s) * eps`, one row per observation.
    pub fn sample(&self, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let phi = tape.bind(&self.params);
        let std = phi.get("enc.log_std")?.exp();
        Ok(self
            .mean_var(&tape, &phi, x)?
            .add(tape.leaf(eps.clone()).mul_row(std)?)?
            .value())
    }

    /// Per-row `log q(z_n | x_n)` as a `[N, 1]` node.
    pub fn log_density_var<'t>(
        &self,
        tape: &'t Tape,
        phi: &BoundParams<'t>,
        x: &Tensor,
        z: &Tensor,
    ) -> Result<Var<'t>> {
        let log_std = phi.get("enc.log_std")?;
        let u = tape
            .leaf(z.clone())
            .sub(self.mean_var(tape, phi, x)?)?
            .mul_row(log_std.neg().exp())?;
        let norm = log_std.sum().add_scalar(0.5 * self.latent_dim() as f64 * (2.0 * PI).ln());
        u.mul(u)?.row_sum().scale(-0.5).add_bias(norm.neg())
    }
}

/// One ascent step on `(1/K) sum_k log p(x_k | z_T^k, theta)`; returns the model and the objective before the step.
pub fn theta_step(
    model: &GenerativeModel,
    z_t: &SampleBatch,
    x: &Tensor,
    lr: f64,
    adam: &mut Adam,
) -> Result<(GenerativeModel, f64)> {
    let (grads, objective) = model.theta_gradient(z_t, x)?;
    let mut next = model.clone();
    next.theta = adam.step(&model.theta, &grads, lr)?;
    Ok((next, objective))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub iterations: usize,
    /// Observations per iteration; each gets one chain.
    pub batch_size: usize,
    pub kernel: KernelConfig,
    pub lr_phi: f64,
    pub lr_theta: f64,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 100,
            kernel: KernelConfig::mala(5, 0.05).with_acceptance_target(0.9),
            lr_phi: 0.01,
            lr_theta: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MleOutcome {
    pub model: GenerativeModel,
    pub encoder: GaussianEncoder,
    /// `mean log p(x | z_T, theta)` over each iteration's batch, before its update.
    pub objective_trace: Vec<f64>,
    pub kernel: KernelConfig,
}

/// Joint training of the encoder (inclusive KL to the refined samples) and the decoder.
pub fn fit_generative(
    config: &MleConfig,
    data: &Tensor,
    model: GenerativeModel,
    encoder: GaussianEncoder,
    ledger: &mut RunLedger,
) -> Result<MleOutcome> {
    config.kernel.validate()?;
    if data.cols() != model.obs_dim() || encoder.latent_dim() != model.latent_dim() {
        return Err(AmcError::dimension("observations", &[model.obs_dim()], &[data.cols()]));
    }
    if config.batch_size < 1 || config.batch_size > data.rows() {
        return Err(AmcError::Config(format!(
            "batch size must lie in 1..={}, got {}",
            data.rows(),
            config.batch_size
        )));
    }
    if !(config.lr_phi > 0.0 && config.lr_theta > 0.0) {
        return Err(AmcError::Config("learning rates must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = model;
    let mut encoder = encoder;
    let mut kernel = config.kernel.clone();
    let (mut phi_opt, mut theta_opt) = (Adam::new(), Adam::new());
    let mut trace = Vec::with_capacity(config.iterations);
    let latent = model.latent_dim();
    let b = config.batch_size;

    for it in 0..config.iterations {
        let mut step = || -> Result<LedgerRecord> {
            let idx = rand::seq::index::sample(&mut rng, data.rows(), b).into_vec();
            let rows: Vec<&[f64]> = idx.iter().map(|&i| data.row(i)).collect();
            let x = Tensor::from_rows(&rows)?;
            let eps = Tensor::matrix(b, latent, (0..b * latent).map(|_| rng.sample(StandardNormal)).collect())?;
            let z0 = SampleBatch::new(encoder.sample(&x, &eps)?, Provenance::StudentInitial)?;

            let posteriors: Vec<LatentPosterior<'_>> = rows.iter().map(|r| model.posterior(r)).collect();
            let targets: Vec<&dyn TargetDensity> = posteriors.iter().map(|p| p as &dyn TargetDensity).collect();
            let mut streams = ParticleStreams::new(rng.random(), b);
            let run = run_chain_conditional(&z0, &kernel, &targets, &mut streams)?;
            drop(targets);
            drop(posteriors);

            let tape = Tape::new();
            let phi = tape.bind(&encoder.params);
            let enc_loss = encoder.log_density_var(&tape, &phi, &x, run.batch.particles())?.mean().neg();
            let grads = tape.grad(enc_loss, &phi)?;
            encoder.params = phi_opt.step(&encoder.params, &grads, config.lr_phi)?;

            let (next, objective) = theta_step(&model, &run.batch, &x, config.lr_theta, &mut theta_opt)?;
            if !objective.is_finite() {
                return Err(AmcError::NonFinite(format!("decoder objective is {objective}")));
            }
            model = next;
            trace.push(objective);
            if kernel.acceptance_target.is_some() {
                kernel = adapt_step_size(&kernel, run.acceptance_rate);
            }
            Ok(LedgerRecord {
                iteration: it,
                rule: "inclusive_kl".into(),
                rule_loss: enc_loss.item()?,
                disc_loss: None,
                ksd: None,
                acceptance_rate: run.acceptance_rate,
                eta: kernel.step_size,
                wall_ms: 0,
            })
        };
        let record = step().map_err(|e| e.at_iteration(it))?;
        ledger.push(record)?;
    }
    Ok(MleOutcome {
        model,
        encoder,
        objective_trace: trace,
        kernel,
    })
}

fn frob2(t: &Tensor) -> f64 {
    t.values().iter().map(|v| v * v).sum()
}

/// `min_Q |Q W - W*|_F / |W*|_F` over orthogonal `Q`, for weights of shape `[latent, obs]`
/// with one or two latent dimensions. The latent prior is rotation invariant, so
/// decoder weights are only identified up to such a `Q`.
pub fn procrustes_relative_error(w: &Tensor, w_true: &Tensor) -> Result<f64> {
    if w.shape() != w_true.shape() {
        return Err(AmcError::dimension("decoder weights", w_true.shape(), w.shape()));
    }
    // |QW - W*|^2 = |W|^2 + |W*|^2 - 2 tr(Q A) with A = W W*^T; pick the maximiser,
    // then form the residual directly to avoid cancellation.
    let a = w.matmul(&w_true.transpose())?;
    let q = match w.rows() {
        1 => Tensor::matrix(1, 1, vec![if a.get(0, 0) < 0.0 { -1.0 } else { 1.0 }])?,
        2 => {
            let (a11, a12, a21, a22) = (a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1));
            let (rc, rs) = (a11 + a22, a12 - a21);
            let (fc, fs) = (a11 - a22, a12 + a21);
            let (rn, fnorm) = (rc.hypot(rs), fc.hypot(fs));
            if rn >= fnorm {
                let (c, s) = if rn > 0.0 { (rc / rn, rs / rn) } else { (1.0, 0.0) };
                Tensor::matrix(2, 2, vec![c, -s, s, c])?
            } else {
                let (c, s) = (fc / fnorm, fs / fnorm);
                Tensor::matrix(2, 2, vec![c, s, s, -c])?
            }
        }
        n => {
            return Err(AmcError::Config(format!(
                "alignment is implemented for 1 or 2 latent dimensions, got {n}"
            )))
        }
    };
    let aligned = q.matmul(w)?;
    let sq: f64 = aligned
        .values()
        .iter()
        .zip(w_true.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt() / frob2(w_true).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn linear_model(seed: u64) -> GenerativeModel {
        GenerativeModel::new(&[2, 5], Activation::Identity, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn log_likelihood_by_hand() {
        let mut m = linear_model(0);
        m.theta = ParamSet::new()
            .with("layer0.weight", Tensor::matrix(2, 5, vec![1.0; 10]).unwrap())
            .unwrap()
            .with("layer0.bias", Tensor::zeros(&[5]))
            .unwrap();
        let z = [0.5, -0.25];
        let x = [0.0, 1.0, 0.25, 0.25, 0.0];
        let s2: f64 = 0.25;
        let sq: f64 = x.iter().map(|xi: &f64| (xi - 0.25).powi(2)).sum();
        let oracle = -0.5 * sq / s2 - 2.5 * (2.0 * PI * s2).ln();
        assert_relative_eq!(m.log_likelihood(&z, &x).unwrap(), oracle, epsilon = 1e-12);
    }

    #[test]
    fn posterior_gradient_matches_finite_differences() {
        let m = GenerativeModel::new(&[2, 16, 5], Activation::LeakyRelu, 0.3, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let post = m.posterior(&[0.1, -0.3, 1.0, 0.5, 0.2]);
        let z = [0.3, -0.7];
        let g = post.grad_log_density(&z);
        for i in 0..2 {
            let h = 1e-5;
            let mut zp = z;
            zp[i] += h;
            let mut zm = z;
            zm[i] -= h;
            let fd = (post.log_density(&zp) - post.log_density(&zm)) / (2.0 * h);
            assert!((g[i] - fd).abs() / fd.abs().max(1e-3) < 1e-5);
        }
    }

    /// Least-squares decoder for fixed latents: solve the normal equations with a bias column.
    fn least_squares(z: &SampleBatch, x: &Tensor) -> ParamSet {
        let n = z.len();
        let design: Vec<[f64; 3]> = z.iter().map(|r| [r[0], r[1], 1.0]).collect();
        let mut g = [[0.0; 3]; 3];
        for r in &design {
            for i in 0..3 {
                for j in 0..3 {
                    g[i][j] += r[i] * r[j];
                }
            }
        }
        // closed-form 3x3 inverse via cofactors
        let det = g[0][0] * (g[1][1] * g[2][2] - g[1][2] * g[2][1])
            - g[0][1] * (g[1][0] * g[2][2] - g[1][2] * g[2][0])
            + g[0][2] * (g[1][0] * g[2][1] - g[1][1] * g[2][0]);
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                inv[i][j] = (g[r0][c0] * g[r1][c1] - g[r0][c1] * g[r1][c0]) / det;
            }
        }
        let mut w = vec![0.0; 10];
        let mut b = vec![0.0; 5];
        for o in 0..5 {
            let mut rhs = [0.0; 3];
            for k in 0..n {
                for i in 0..3 {
                    rhs[i] += design[k][i] * x.get(k, o);
                }
            }
            let coef: Vec<f64> = (0..3).map(|i| (0..3).map(|j| inv[i][j] * rhs[j]).sum()).collect();
            w[o] = coef[0];
            w[5 + o] = coef[1];
            b[o] = coef[2];
        }
        ParamSet::new()
            .with("layer0.weight", Tensor::matrix(2, 5, w).unwrap())
            .unwrap()
            .with("layer0.bias", Tensor::vector(b))
            .unwrap()
    }

    #[test]
    fn gradient_vanishes_at_least_squares_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        let z = SampleBatch::from_rows(&z, Provenance::TeacherEvolved).unwrap();
        let x = Tensor::matrix(40, 5, (0..200).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let mut m = linear_model(1);
        m.theta = least_squares(&z, &x);
        let (g, _) = m.theta_gradient(&z, &x).unwrap();
        assert!(g.l2_norm() < 1e-6, "{}", g.l2_norm());
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let m = linear_model(2);
        let z = SampleBatch::from_rows(&[[0.1, 0.2], [0.3, -1.0]], Provenance::TeacherEvolved).unwrap();
        let x = Tensor::from_rows(&[[1.0; 5], [0.0; 5]]).unwrap();
        let (next, _) = theta_step(&m, &z, &x, 0.0, &mut Adam::new()).unwrap();
        assert_eq!(next, m);
    }

    #[test]
    fn procrustes_ignores_rotation_and_reflection() {
        let w_true = Tensor::matrix(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.3, 0.8]).unwrap();
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Tensor::from_rows(&[[c, -s], [s, c]]).unwrap();
        let refl = Tensor::from_rows(&[[c, s], [s, -c]]).unwrap();
        for q in [rot, refl] {
            let w = q.matmul(&w_true).unwrap();
            assert!(procrustes_relative_error(&w, &w_true).unwrap() < 1e-12);
        }
        let scaled = w_true.map(|v| 1.1 * v);
        assert_relative_eq!(procrustes_relative_error(&scaled, &w_true).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn encoder_density_matches_closed_form() {
        let enc = GaussianEncoder::new(5, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_rows(&[[0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap();
        let z = enc.sample(&x, &Tensor::zeros(&[1, 2])).unwrap();
        let tape = Tape::new();
        let phi = tape.bind(&enc.params);
        let lq = enc.log_density_var(&tape, &phi, &x, &z).unwrap().item().unwrap();
        assert_relative_eq!(lq, -(2.0 * PI).ln(), epsilon = 1e-12);
    }
}
