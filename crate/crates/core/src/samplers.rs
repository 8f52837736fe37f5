//! The student: parametric samplers that warp noise into particles.
//!
//! Every family draws its noise up front ([`SamplerSpec::draw_noise`]) and
//! then applies a deterministic, differentiable warp on a tape, so pathwise
//! gradients reach the parameters. Only the plain mean-field Gaussian has a
//! tractable density.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{AmcError, Result};
use crate::kernels::{Provenance, SampleBatch};
use crate::nn::{check_mlp_params, forward_mlp, init_mlp, Activation};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const DEFAULT_DROPOUT_RATE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerFamily {
    MeanFieldGaussian,
    VariationalProgram,
    ImplicitMlp,
    DropoutMlp,
}

impl std::str::FromStr for SamplerFamily {
    type Err = AmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_field_gaussian" | "gaussian" => Ok(Self::MeanFieldGaussian),
            "variational_program" => Ok(Self::VariationalProgram),
            "implicit_mlp" | "mlp" => Ok(Self::ImplicitMlp),
            "dropout_mlp" => Ok(Self::DropoutMlp),
            other => Err(AmcError::Config(format!("unknown sampler family '{other}'"))),
        }
    }
}

/// A student sampler: family tag, parameters and shape information.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub family: SamplerFamily,
    pub params: ParamSet,
    pub noise_dim: usize,
    pub output_dim: usize,
    /// Hidden layer widths of the MLP families.
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Probability of zeroing a noise coordinate (dropout family only).
    pub dropout_rate: f64,
    /// Standardise each batch of Gaussian noise before the affine warp.
    #[serde(default)]
    pub ensemble_normalized: bool,
}

/// Noise consumed by one call to the warp.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerNoise {
    /// `[K, noise_dim]`.
    pub eps: Tensor,
    /// Bernoulli keep-mask with the shape of `eps` (dropout family only).
    pub mask: Option<Tensor>,
}

impl SamplerNoise {
    pub fn len(&self) -> usize {
        self.eps.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Network input: the noise with the mask applied.
    pub fn masked(&self) -> Tensor {
        match &self.mask {
            Some(m) => self.eps.zip_map(m, |e, m| e * m),
            None => self.eps.clone(),
        }
    }
}

const MEAN: &str = "mean";
const LOG_STD: &str = "log_std";

fn scalar_param(v: f64) -> Tensor {
    Tensor::vector(vec![v])
}

/// Per-column standardisation with the population standard deviation.
fn standardise_columns(x: &Tensor) -> Tensor {
    let (k, d) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..d {
        let mean = (0..k).map(|i| x.get(i, j)).sum::<f64>() / k as f64;
        let var = (0..k).map(|i| (x.get(i, j) - mean).powi(2)).sum::<f64>() / k as f64;
        let sd = var.sqrt();
        for i in 0..k {
            let centred = x.get(i, j) - mean;
            out.row_mut(i)[j] = if sd > 0.0 { centred / sd } else { centred };
        }
    }
    out
}

impl SamplerSpec {
    pub fn mean_field_gaussian(mean: Vec<f64>, log_std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != log_std.len() {
            return Err(AmcError::Config("mean and log_std must have equal, non-zero length".into()));
        }
        let d = mean.len();
        let params = ParamSet::new()
            .with(MEAN, Tensor::vector(mean))?
            .with(LOG_STD, Tensor::vector(log_std))?;
        Ok(Self {
            family: SamplerFamily::MeanFieldGaussian,
            params,
            noise_dim: d,
            output_dim: d,
            hidden: vec![],
            activation: Activation::Identity,
            dropout_rate: 0.0,
            ensemble_normalized: false,
        })
    }

    /// `z = 1[e3 >= 0] relu(w1 e1 + b1) - 1[e3 < 0] relu(w2 e2 + b2)`.
    pub fn variational_program(w1: f64, b1: f64, w2: f64, b2: f64) -> Result<Self> {
        let params = ParamSet::new()
            .with("w1", scalar_param(w1))?
            .with("b1", scalar_param(b1))?
            .with("w2", scalar_param(w2))?
            .with("b2", scalar_param(b2))?;
        Ok(Self {
            family: SamplerFamily::VariationalProgram,
            params,
            noise_dim: 3,
            output_dim: 1,
            hidden: vec![],
            activation: Activation::Relu,
            dropout_rate: 0.0,
            ensemble_normalized: false,
        })
    }

    /// Variational program with weights near one and biases near zero.
    pub fn variational_program_random<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let mut n = || 0.1 * rng.sample::<f64, _>(StandardNormal);
        Self::variational_program(1.0 + n(), n(), 1.0 + n(), n())
    }

    pub fn implicit_mlp<R: Rng + ?Sized>(
        noise_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![noise_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(output_dim);
        Ok(Self {
            family: SamplerFamily::ImplicitMlp,
            params: init_mlp(&sizes, rng)?,
            noise_dim,
            output_dim,
            hidden: hidden.to_vec(),
            activation,
            dropout_rate: 0.0,
            ensemble_normalized: false,
        })
    }

    pub fn dropout_mlp<R: Rng + ?Sized>(
        noise_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(AmcError::Config(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let mut spec = Self::implicit_mlp(noise_dim, hidden, output_dim, activation, rng)?;
        spec.family = SamplerFamily::DropoutMlp;
        spec.dropout_rate = dropout_rate;
        Ok(spec)
    }

    /// Switches a mean-field Gaussian to batch-standardised noise.
    pub fn with_ensemble_normalization(mut self) -> Result<Self> {
        if self.family != SamplerFamily::MeanFieldGaussian {
            return Err(AmcError::Config(
                "ensemble normalisation applies to the mean-field Gaussian only".into(),
            ));
        }
        self.ensemble_normalized = true;
        Ok(self)
    }

    pub fn density_tractable(&self) -> bool {
        self.family == SamplerFamily::MeanFieldGaussian && !self.ensemble_normalized
    }

    /// `[noise_dim, hidden.., output_dim]` for the MLP families.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.noise_dim];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.output_dim);
        sizes
    }

    /// Checks that the parameters match the family's layout.
    pub fn validate(&self) -> Result<()> {
        match self.family {
            SamplerFamily::MeanFieldGaussian => {
                for name in [MEAN, LOG_STD] {
                    let t = self.params.get(name)?;
                    if t.shape() != [self.output_dim] {
                        return Err(AmcError::dimension(name, &[self.output_dim], t.shape()));
                    }
                }
                if self.noise_dim != self.output_dim {
                    return Err(AmcError::Config("gaussian noise_dim must equal output_dim".into()));
                }
            }
            SamplerFamily::VariationalProgram => {
                for name in ["w1", "b1", "w2", "b2"] {
                    let t = self.params.get(name)?;
                    if t.numel() != 1 {
                        return Err(AmcError::dimension(name, &[1], t.shape()));
                    }
                }
                if self.noise_dim != 3 || self.output_dim != 1 {
                    return Err(AmcError::Config(
                        "the variational program maps 3 noise dims to 1 output".into(),
                    ));
                }
            }
            SamplerFamily::ImplicitMlp | SamplerFamily::DropoutMlp => {
                check_mlp_params(&self.params, &self.layer_sizes())?;
            }
        }
        if !self.params.iter().all(|(_, t)| t.all_finite()) {
            return Err(AmcError::NonFinite("sampler parameters are not finite".into()));
        }
        Ok(())
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<SamplerNoise> {
        if k < 1 {
            return Err(AmcError::Config("need at least one particle".into()));
        }
        if self.ensemble_normalized && k < 2 {
            return Err(AmcError::Config(
                "ensemble normalisation needs at least two particles".into(),
            ));
        }
        let values: Vec<f64> = (0..k * self.noise_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let mut eps = Tensor::matrix(k, self.noise_dim, values)?;
        if self.ensemble_normalized {
            eps = standardise_columns(&eps);
        }
        let mask = if self.family == SamplerFamily::DropoutMlp {
            let keep: Vec<f64> = (0..k * self.noise_dim)
                .map(|_| if rng.random::<f64>() < self.dropout_rate { 0.0 } else { 1.0 })
                .collect();
            Some(Tensor::matrix(k, self.noise_dim, keep)?)
        } else {
            None
        };
        Ok(SamplerNoise { eps, mask })
    }

    /// The family's warp applied to `noise`, recorded on the tape. Output is `[K, output_dim]`.
    pub fn warp<'t>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        noise: &SamplerNoise,
    ) -> Result<Var<'t>> {
        if noise.eps.cols() != self.noise_dim {
            return Err(AmcError::dimension("sampler noise", &[self.noise_dim], &[noise.eps.cols()]));
        }
        match self.family {
            SamplerFamily::MeanFieldGaussian => {
                let std = params.get(LOG_STD)?.exp();
                tape.leaf(noise.eps.clone()).mul_row(std)?.add_bias(params.get(MEAN)?)
            }
            SamplerFamily::VariationalProgram => {
                let k = noise.len();
                let column = |j: usize| -> Result<Tensor> {
                    Tensor::matrix(k, 1, (0..k).map(|i| noise.eps.get(i, j)).collect())
                };
                let upper: Vec<f64> = (0..k)
                    .map(|i| if noise.eps.get(i, 2) >= 0.0 { 1.0 } else { 0.0 })
                    .collect();
                let lower: Vec<f64> = upper.iter().map(|u| 1.0 - u).collect();
                let a = tape
                    .leaf(column(0)?)
                    .mul_row(params.get("w1")?)?
                    .add_bias(params.get("b1")?)?
                    .relu()
                    .mul(tape.leaf(Tensor::matrix(k, 1, upper)?))?;
                let b = tape
                    .leaf(column(1)?)
                    .mul_row(params.get("w2")?)?
                    .add_bias(params.get("b2")?)?
                    .relu()
                    .mul(tape.leaf(Tensor::matrix(k, 1, lower)?))?;
                a.sub(b)
            }
            SamplerFamily::ImplicitMlp | SamplerFamily::DropoutMlp => forward_mlp(
                params,
                &self.layer_sizes(),
                self.activation,
                tape.leaf(noise.masked()),
            ),
        }
    }

    /// Draws noise and warps it on `tape`; returns the particles node and the noise used.
    pub fn sample_var<'t, R: Rng + ?Sized>(
        &self,
        tape: &'t Tape,
        params: &BoundParams<'t>,
        k: usize,
        rng: &mut R,
    ) -> Result<(Var<'t>, SamplerNoise)> {
        let noise = self.draw_noise(k, rng)?;
        Ok((self.warp(tape, params, &noise)?, noise))
    }

    /// Particles produced from fixed noise, without keeping a tape around.
    pub fn warp_values(&self, noise: &SamplerNoise) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        Ok(self.warp(&tape, &bound, noise)?.value())
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<SampleBatch> {
        let noise = self.draw_noise(k, rng)?;
        SampleBatch::new(self.warp_values(&noise)?, Provenance::StudentInitial)
    }

    fn require_tractable(&self) -> Result<()> {
        if !self.density_tractable() {
            return Err(AmcError::UnsupportedDensity(format!(
                "{:?}{} has no tractable density",
                self.family,
                if self.ensemble_normalized { " (ensemble-normalised)" } else { "" }
            )));
        }
        Ok(())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.require_tractable()?;
        if z.len() != self.output_dim {
            return Err(AmcError::dimension("log_density input", &[self.output_dim], &[z.len()]));
        }
        let mean = self.params.get(MEAN)?.values();
        let log_std = self.params.get(LOG_STD)?.values();
        Ok(z.iter()
            .zip(mean)
            .zip(log_std)
            .map(|((z, m), ls)| {
                let u = (z - m) * (-ls).exp();
                -0.5 * u * u - ls - 0.5 * (2.0 * PI).ln()
            })
            .sum())
    }

    /// Per-particle log densities `[K, 1]` of the rows of `z`, differentiable in the parameters.
    pub fn log_density_var<'t>(&self, params: &BoundParams<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.require_tractable()?;
        let log_std = params.get(LOG_STD)?;
        let u = z.add_bias(params.get(MEAN)?.neg())?.mul_row(log_std.neg().exp())?;
        let norm = log_std.sum().add_scalar(0.5 * self.output_dim as f64 * (2.0 * PI).ln());
        u.mul(u)?.row_sum().scale(-0.5).add_bias(norm.neg())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// `K` Gaussian draws standardised per dimension, then scaled by the learned `sigma` and shifted by `mu`.
pub fn normalized_ensemble_sample<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if spec.family != SamplerFamily::MeanFieldGaussian {
        return Err(AmcError::Config("normalised ensembles need a mean-field Gaussian".into()));
    }
    if k < 2 {
        return Err(AmcError::Config(
            "ensemble normalisation needs at least two particles".into(),
        ));
    }
    let mut normalized = spec.clone();
    normalized.ensemble_normalized = true;
    normalized.sample(k, rng)
}

pub fn dropout_sample<R: Rng + ?Sized>(
    spec: &SamplerSpec,
    k: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if spec.family != SamplerFamily::DropoutMlp {
        return Err(AmcError::Config("dropout sampling needs a dropout MLP".into()));
    }
    spec.sample(k, rng)
}
