//! Divergence estimates between the student's samples and the teacher's.
//!
//! Teacher samples always enter as constants. Student samples enter as tape
//! nodes so gradients reach the sampler parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Var};
use crate::error::{AmcError, Result};
use crate::kernels::{Provenance, SampleBatch};
use crate::nn::{forward_mlp, init_mlp, Activation};
use crate::params::ParamSet;
use crate::samplers::SamplerSpec;
use crate::targets::TargetDensity;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    InclusiveKl,
    AdversarialJs,
    EnergyMatching,
}

impl std::str::FromStr for Rule {
    type Err = AmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inclusive_kl" => Ok(Self::InclusiveKl),
            "adversarial_js" => Ok(Self::AdversarialJs),
            "energy_matching" => Ok(Self::EnergyMatching),
            other => Err(AmcError::Config(format!("unknown update rule '{other}'"))),
        }
    }
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::InclusiveKl => "inclusive_kl",
            Rule::AdversarialJs => "adversarial_js",
            Rule::EnergyMatching => "energy_matching",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `mean log(1 - sigmoid(d(z0)))`, minimised.
    Saturating,
    /// `-mean log sigmoid(d(z0))`.
    #[default]
    Nonsaturating,
}

impl std::str::FromStr for GeneratorLoss {
    type Err = AmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saturating" => Ok(GeneratorLoss::Saturating),
            "nonsaturating" | "non_saturating" => Ok(GeneratorLoss::Nonsaturating),
            other => Err(AmcError::Config(format!("unknown generator loss '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRuleConfig {
    pub rule: Rule,
    /// Exponent of the energy-matching gap.
    pub beta: f64,
    pub generator_loss: GeneratorLoss,
    /// Use a fresh student batch for the generator loss instead of the chain seeds.
    pub independent_z0: bool,
    /// Discriminator updates per generator update.
    pub disc_steps: usize,
    pub disc_hidden: Vec<usize>,
}

impl Default for UpdateRuleConfig {
    fn default() -> Self {
        Self {
            rule: Rule::AdversarialJs,
            beta: 1.0,
            generator_loss: GeneratorLoss::Nonsaturating,
            independent_z0: false,
            disc_steps: 1,
            disc_hidden: vec![20, 20],
        }
    }
}

impl UpdateRuleConfig {
    pub fn new(rule: Rule) -> Self {
        Self {
            rule,
            ..Self::default()
        }
    }

    pub fn validate(&self, spec: &SamplerSpec) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(AmcError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.rule == Rule::InclusiveKl && !spec.density_tractable() {
            return Err(AmcError::Config(format!(
                "inclusive KL needs a sampler with a tractable density, not {:?}",
                spec.family
            )));
        }
        if self.rule == Rule::AdversarialJs && self.disc_steps < 1 {
            return Err(AmcError::Config("disc_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// MLP critic with leaky-ReLU hidden layers and a raw logit output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub params: ParamSet,
    pub layer_sizes: Vec<usize>,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut layer_sizes = vec![input_dim];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(1);
        Ok(Self {
            params: init_mlp(&layer_sizes, rng)?,
            layer_sizes,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Logits `[K, 1]` for the rows of `z`.
    pub fn logits<'t>(&self, params: &BoundParams<'t>, z: Var<'t>) -> Result<Var<'t>> {
        forward_mlp(params, &self.layer_sizes, Activation::LeakyRelu, z)
    }

    pub fn logit_values(&self, batch: &SampleBatch) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params);
        let out = self.logits(&bound, tape.leaf(batch.particles().clone()))?;
        Ok(out.value().into_values())
    }
}

fn require_teacher(batch: &SampleBatch) -> Result<()> {
    if batch.provenance() != Provenance::TeacherEvolved {
        return Err(AmcError::Contract("expected teacher-evolved samples".into()));
    }
    Ok(())
}

/// `-(1/K) sum_k log q(z_T^k)`; the teacher samples are constants.
pub fn inclusive_kl_loss<'t>(
    tape: &'t Tape,
    spec: &SamplerSpec,
    params: &BoundParams<'t>,
    z_t: &SampleBatch,
) -> Result<Var<'t>> {
    require_teacher(z_t)?;
    let z = tape.leaf(z_t.particles().clone());
    Ok(spec.log_density_var(params, z)?.mean().neg())
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses<'t> {
    /// `-D_adv`, minimised by the critic.
    pub disc_loss: Var<'t>,
    /// Minimised by the student.
    pub gen_loss: Var<'t>,
    pub d_adv: f64,
}

/// Critic bound `D_adv = mean log s(d(zT)) + mean log(1 - s(d(z0)))` and the generator loss.
pub fn adversarial_js_losses<'t>(
    tape: &'t Tape,
    z0: Var<'t>,
    z_t: &SampleBatch,
    disc: &Discriminator,
    disc_params: &BoundParams<'t>,
    variant: GeneratorLoss,
) -> Result<AdversarialLosses<'t>> {
    require_teacher(z_t)?;
    let k0 = z0.shape().first().copied().unwrap_or(0);
    if k0 != z_t.len() {
        return Err(AmcError::Contract(format!(
            "student batch has {k0} particles but teacher batch has {}",
            z_t.len()
        )));
    }
    let d_t = disc.logits(disc_params, tape.leaf(z_t.particles().clone()))?;
    let d_0 = disc.logits(disc_params, z0)?;
    // log(1 - s(x)) = -softplus(x)
    let real = d_t.log_sigmoid().mean();
    let fake = d_0.softplus().mean().neg();
    let d_adv = real.add(fake)?;
    let gen_loss = match variant {
        GeneratorLoss::Saturating => d_0.softplus().mean().neg(),
        GeneratorLoss::Nonsaturating => d_0.log_sigmoid().mean().neg(),
    };
    Ok(AdversarialLosses {
        disc_loss: d_adv.neg(),
        gen_loss,
        d_adv: d_adv.item()?,
    })
}

/// Mean of `log p` over the rows of a constant batch.
pub fn mean_log_density<T: TargetDensity + ?Sized>(batch: &SampleBatch, target: &T) -> f64 {
    batch.iter().map(|z| target.log_density(z)).sum::<f64>() / batch.len() as f64
}

/// `|mean_k log p(z_T^k) - mean_k log p(z_0^k)|^beta`, differentiable through `z0` only.
pub fn energy_matching_loss<'t, T: TargetDensity + ?Sized>(
    tape: &'t Tape,
    z0: Var<'t>,
    z_t: &SampleBatch,
    target: &T,
    beta: f64,
) -> Result<Var<'t>> {
    if !(beta > 0.0) {
        return Err(AmcError::Config(format!("beta must be positive, got {beta}")));
    }
    require_teacher(z_t)?;
    let energy_t = mean_log_density(z_t, target);
    let energy_0 = tape.row_function(z0, |z| target.value_and_grad(z))?.mean();
    Ok(energy_0.neg().add_scalar(energy_t).abs_pow(beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Adam;
    use crate::targets::GaussianMixture1D;
    use crate::tensor::Tensor;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::PI;

    fn teacher(rows: &[[f64; 1]]) -> SampleBatch {
        SampleBatch::from_rows(rows, Provenance::TeacherEvolved).unwrap()
    }

    fn kl_value(spec: &SamplerSpec, z_t: &SampleBatch) -> f64 {
        let tape = Tape::new();
        let bound = tape.bind(&spec.params);
        inclusive_kl_loss(&tape, spec, &bound, z_t).unwrap().item().unwrap()
    }

    #[test]
    fn kl_at_mean_is_normaliser() {
        let spec = SamplerSpec::mean_field_gaussian(vec![1.0, -2.0], vec![0.0, 0.0]).unwrap();
        let z_t = SampleBatch::from_rows(&[[1.0, -2.0]; 4], Provenance::TeacherEvolved).unwrap();
        assert_relative_eq!(kl_value(&spec, &z_t), (2.0 * PI).ln(), epsilon = 1e-14);
    }

    #[test]
    fn kl_three_points_by_hand() {
        let spec = SamplerSpec::mean_field_gaussian(vec![0.0], vec![0.0]).unwrap();
        let pts = [-1.0, 0.5, 2.0];
        let oracle = -pts
            .iter()
            .map(|z: &f64| -0.5 * z * z - 0.5 * (2.0 * PI).ln())
            .sum::<f64>()
            / 3.0;
        assert_relative_eq!(kl_value(&spec, &teacher(&[[-1.0], [0.5], [2.0]])), oracle, epsilon = 1e-14);
    }

    #[test]
    fn kl_rejects_student_batches_and_wild_samplers() {
        let spec = SamplerSpec::mean_field_gaussian(vec![0.0], vec![0.0]).unwrap();
        let z0 = SampleBatch::from_rows(&[[0.0]], Provenance::StudentInitial).unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&spec.params);
        assert!(inclusive_kl_loss(&tape, &spec, &bound, &z0).is_err());

        let vp = SamplerSpec::variational_program(1.0, 0.0, 1.0, 0.0).unwrap();
        let bound = tape.bind(&vp.params);
        assert!(matches!(
            inclusive_kl_loss(&tape, &vp, &bound, &teacher(&[[0.0]])),
            Err(AmcError::UnsupportedDensity(_))
        ));
        assert!(UpdateRuleConfig::new(Rule::InclusiveKl).validate(&vp).is_err());
    }

    #[test]
    fn kl_minimiser_is_batch_moments() {
        let rows: Vec<[f64; 1]> = [0.3, -1.2, 2.5, 0.9, 1.7, -0.4].iter().map(|&v| [v]).collect();
        let z_t = teacher(&rows);
        let mean = rows.iter().map(|r| r[0]).sum::<f64>() / 6.0;
        let var = rows.iter().map(|r| (r[0] - mean).powi(2)).sum::<f64>() / 6.0;

        let mut spec = SamplerSpec::mean_field_gaussian(vec![-3.0], vec![1.0]).unwrap();
        for _ in 0..2000 {
            let tape = Tape::new();
            let bound = tape.bind(&spec.params);
            let loss = inclusive_kl_loss(&tape, &spec, &bound, &z_t).unwrap();
            let g = tape.grad(loss, &bound).unwrap();
            // Newton-like preconditioning keeps the plain descent fast.
            let sigma2 = (2.0 * spec.params.get("log_std").unwrap().values()[0]).exp();
            let mu = spec.params.get_mut("mean").unwrap();
            mu.values_mut()[0] -= sigma2 * g.get("mean").unwrap().values()[0];
            let ls = spec.params.get_mut("log_std").unwrap();
            ls.values_mut()[0] -= 0.25 * g.get("log_std").unwrap().values()[0];
        }
        let mu = spec.params.get("mean").unwrap().values()[0];
        let sd = spec.params.get("log_std").unwrap().values()[0].exp();
        assert!((mu - mean).abs() < 1e-8);
        assert!((sd * sd - var).abs() < 1e-8);
    }

    fn zero_disc() -> Discriminator {
        let mut disc = Discriminator::new(1, &[20, 20], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (_, t) in disc.params.iter_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        disc
    }

    #[test]
    fn zero_critic_gives_two_log_half() {
        let disc = zero_disc();
        let tape = Tape::new();
        let bound = tape.bind(&disc.params);
        let z0 = tape.leaf(Tensor::from_rows(&[[0.1], [2.0]]).unwrap());
        let l = adversarial_js_losses(&tape, z0, &teacher(&[[1.0], [-1.0]]), &disc, &bound, GeneratorLoss::Nonsaturating)
            .unwrap();
        assert_relative_eq!(l.d_adv, 2.0 * 0.5f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(l.disc_loss.item().unwrap(), -2.0 * 0.5f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(l.gen_loss.item().unwrap(), 2.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn batch_size_mismatch_is_contract_error() {
        let disc = zero_disc();
        let tape = Tape::new();
        let bound = tape.bind(&disc.params);
        let z0 = tape.leaf(Tensor::from_rows(&[[0.1]]).unwrap());
        assert!(matches!(
            adversarial_js_losses(&tape, z0, &teacher(&[[1.0], [2.0]]), &disc, &bound, GeneratorLoss::Saturating),
            Err(AmcError::Contract(_))
        ));
    }

    fn gaussian_batch(rng: &mut ChaCha8Rng, k: usize, shift: f64) -> Tensor {
        Tensor::matrix(k, 1, (0..k).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    fn train_critic(shift: f64, steps: usize, seed: u64) -> (Discriminator, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut disc = Discriminator::new(1, &[20, 20], &mut rng).unwrap();
        let mut adam = Adam::new();
        for _ in 0..steps {
            let tape = Tape::new();
            let bound = tape.bind(&disc.params);
            let z0 = tape.leaf(gaussian_batch(&mut rng, 256, 0.0));
            let z_t = SampleBatch::new(gaussian_batch(&mut rng, 256, shift), Provenance::TeacherEvolved).unwrap();
            let l = adversarial_js_losses(&tape, z0, &z_t, &disc, &bound, GeneratorLoss::Nonsaturating).unwrap();
            let g = tape.grad(l.disc_loss, &bound).unwrap();
            disc.params = adam.step(&disc.params, &g, 0.005).unwrap();
        }
        (disc, rng)
    }

    #[test]
    fn critic_on_identical_distributions_stays_near_minus_two_log_two() {
        let (disc, mut rng) = train_critic(0.0, 300, 11);
        let tape = Tape::new();
        let bound = tape.bind(&disc.params);
        let z0 = tape.leaf(gaussian_batch(&mut rng, 20_000, 0.0));
        let z_t = SampleBatch::new(gaussian_batch(&mut rng, 20_000, 0.0), Provenance::TeacherEvolved).unwrap();
        let l = adversarial_js_losses(&tape, z0, &z_t, &disc, &bound, GeneratorLoss::Nonsaturating).unwrap();
        assert!((l.d_adv + 2.0 * 2.0f64.ln()).abs() < 0.02, "{}", l.d_adv);
    }

    #[test]
    fn generator_gradient_is_nonzero_when_separated() {
        let (disc, mut rng) = train_critic(2.0, 200, 3);
        let spec = SamplerSpec::mean_field_gaussian(vec![0.0], vec![0.0]).unwrap();
        for variant in [GeneratorLoss::Saturating, GeneratorLoss::Nonsaturating] {
            let tape = Tape::new();
            let phi = tape.bind(&spec.params);
            let psi = tape.bind(&disc.params);
            let (z0, _) = spec.sample_var(&tape, &phi, 128, &mut rng).unwrap();
            let z_t = SampleBatch::new(gaussian_batch(&mut rng, 128, 2.0), Provenance::TeacherEvolved).unwrap();
            let l = adversarial_js_losses(&tape, z0, &z_t, &disc, &psi, variant).unwrap();
            let g = tape.grad(l.gen_loss, &phi).unwrap();
            let gm = g.get("mean").unwrap().values()[0];
            // moving the student towards the teacher lowers the loss
            assert!(gm < -1e-3, "{variant:?}: {gm}");
        }
    }

    fn energy(z0: &[[f64; 1]], z_t: &[[f64; 1]], beta: f64) -> f64 {
        let gmm = GaussianMixture1D::default();
        let tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(z0).unwrap());
        energy_matching_loss(&tape, v, &teacher(z_t), &gmm, beta).unwrap().item().unwrap()
    }

    #[test]
    fn energy_matching_cases() {
        let a = [[0.5], [-2.0], [3.1]];
        assert_eq!(energy(&a, &a, 2.0), 0.0);

        let b = [[1.0], [1.5], [-0.2]];
        let g1 = energy(&a, &b, 1.0);
        let g2 = energy(&a, &b, 2.0);
        assert_relative_eq!(g2, g1 * g1, epsilon = 1e-12);
    }

    #[test]
    fn energy_matching_against_direct_mixture_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let gmm = GaussianMixture1D::default();
        let z0: Vec<[f64; 1]> = (0..5).map(|_| [gmm.sample(&mut rng)]).collect();
        let z_t: Vec<[f64; 1]> = (0..5).map(|_| [gmm.sample(&mut rng)]).collect();
        let density = |z: f64| {
            let n = |m: f64| (-(z - m).powi(2) / 2.0).exp() / (2.0 * PI).sqrt();
            (0.5 * n(-3.0) + 0.5 * n(3.0)).ln()
        };
        let m0 = z0.iter().map(|z| density(z[0])).sum::<f64>() / 5.0;
        let m_t = z_t.iter().map(|z| density(z[0])).sum::<f64>() / 5.0;
        assert_relative_eq!(energy(&z0, &z_t, 2.0), (m_t - m0).powi(2), epsilon = 1e-10);
    }

    #[test]
    fn energy_matching_rejects_bad_beta() {
        let gmm = GaussianMixture1D::default();
        let tape = Tape::new();
        let v = tape.leaf(Tensor::from_rows(&[[0.0]]).unwrap());
        assert!(matches!(
            energy_matching_loss(&tape, v, &teacher(&[[0.0]]), &gmm, 0.0),
            Err(AmcError::Config(_))
        ));
    }

    #[test]
    fn energy_gradient_reaches_student_only() {
        let gmm = GaussianMixture1D::default();
        let spec = SamplerSpec::mean_field_gaussian(vec![0.0], vec![0.0]).unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&spec.params);
        let (z0, _) = spec.sample_var(&tape, &bound, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let loss = energy_matching_loss(&tape, z0, &teacher(&[[3.0], [-3.0], [2.5], [3.5], [-2.9]]), &gmm, 2.0).unwrap();
        let g = tape.grad(loss, &bound).unwrap();
        assert!(g.l2_norm() > 0.0);
    }

    #[test]
    fn losses_ignore_particle_order() {
        let a = [[0.5], [-2.0], [3.1], [0.0]];
        let b = [[1.0], [1.5], [-0.2], [4.0]];
        let a_rev: Vec<[f64; 1]> = a.iter().rev().copied().collect();
        let b_rev: Vec<[f64; 1]> = b.iter().rev().copied().collect();
        assert_relative_eq!(energy(&a, &b, 2.0), energy(&a_rev, &b_rev, 2.0), epsilon = 1e-12);

        let spec = SamplerSpec::mean_field_gaussian(vec![0.2], vec![0.1]).unwrap();
        assert_relative_eq!(kl_value(&spec, &teacher(&b)), kl_value(&spec, &teacher(&b_rev)), epsilon = 1e-12);

        let disc = Discriminator::new(1, &[20, 20], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let adv = |x: &[[f64; 1]], y: &[[f64; 1]]| {
            let tape = Tape::new();
            let bound = tape.bind(&disc.params);
            let z0 = tape.leaf(Tensor::from_rows(x).unwrap());
            let l = adversarial_js_losses(&tape, z0, &teacher(y), &disc, &bound, GeneratorLoss::Nonsaturating).unwrap();
            (l.d_adv, l.gen_loss.item().unwrap())
        };
        let (d1, g1) = adv(&a, &b);
        let (d2, g2) = adv(&a_rev, &b_rev);
        assert_relative_eq!(d1, d2, epsilon = 1e-12);
        assert_relative_eq!(g1, g2, epsilon = 1e-12);
    }
}
