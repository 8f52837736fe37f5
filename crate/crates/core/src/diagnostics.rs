//! Sample-quality measures: kernel Stein discrepancy, exact KL trajectories
//! of finite chains, predictive metrics for classifiers and mode coverage.

use serde::{Deserialize, Serialize};

use crate::error::{AmcError, Result};
use crate::kernels::SampleBatch;
use crate::targets::{log_sum_exp, BnnArchitecture, FiniteChain, TargetDensity};
use crate::tensor::Tensor;

/// Points used to estimate the median pairwise distance.
pub const MEDIAN_SUBSET: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    U,
    #[default]
    V,
}

/// RBF kernel `k(x, y) = exp(-|x - y|^2 / (2 h^2))`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KsdConfig {
    pub bandwidth: Bandwidth,
    pub statistic: Statistic,
}

impl KsdConfig {
    pub fn v_statistic() -> Self {
        Self::default()
    }

    pub fn u_statistic() -> Self {
        Self {
            statistic: Statistic::U,
            ..Self::default()
        }
    }

    pub fn with_bandwidth(mut self, h: f64) -> Self {
        self.bandwidth = Bandwidth::Fixed(h);
        self
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance over the first [`MEDIAN_SUBSET`] points, or 1 when it vanishes.
pub fn median_bandwidth(samples: &SampleBatch) -> f64 {
    let n = samples.len().min(MEDIAN_SUBSET);
    let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(samples.particle(i), samples.particle(j)).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if m > 0.0 && m.is_finite() {
        m
    } else {
        1.0
    }
}

/// Stein kernel `u_p(x, y)` for the RBF kernel with bandwidth `h`.
pub fn stein_kernel(x: &[f64], sx: &[f64], y: &[f64], sy: &[f64], h: f64) -> f64 {
    let h2 = h * h;
    let r2 = sq_dist(x, y);
    let k = (-r2 / (2.0 * h2)).exp();
    let mut dot = 0.0;
    let mut cross = 0.0;
    for i in 0..x.len() {
        let diff = x[i] - y[i];
        dot += sx[i] * sy[i];
        cross += (sx[i] - sy[i]) * diff;
    }
    k * (dot + cross / h2 + x.len() as f64 / h2 - r2 / (h2 * h2))
}

fn row_sums(samples: &SampleBatch, scores: &[Vec<f64>], h: f64, skip_diagonal: bool) -> Vec<f64> {
    let k = samples.len();
    let row = |i: usize| -> f64 {
        let (x, sx) = (samples.particle(i), &scores[i]);
        (0..k)
            .filter(|&j| !(skip_diagonal && i == j))
            .map(|j| stein_kernel(x, sx, samples.particle(j), &scores[j], h))
            .sum()
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..k).into_par_iter().map(row).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..k).map(row).collect()
    }
}

/// Kernel Stein discrepancy `E[u_p(x, x')]` of `samples` against `target`.
pub fn ksd<T: TargetDensity + ?Sized>(samples: &SampleBatch, target: &T, cfg: &KsdConfig) -> Result<f64> {
    let k = samples.len();
    if k < 2 {
        return Err(AmcError::Config("KSD needs at least two samples".into()));
    }
    if samples.dim() != target.dim() {
        return Err(AmcError::dimension("KSD samples", &[target.dim()], &[samples.dim()]));
    }
    let h = match cfg.bandwidth {
        Bandwidth::Median => median_bandwidth(samples),
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => {
            return Err(AmcError::Config(format!("KSD bandwidth must be positive, got {h}")))
        }
    };
    let scores: Vec<Vec<f64>> = samples.iter().map(|z| target.grad_log_density(z)).collect();
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(AmcError::NonFinite("score is not finite at a KSD sample".into()));
    }
    let skip = cfg.statistic == Statistic::U;
    // Summed in index order so the result does not depend on thread scheduling.
    let total: f64 = row_sums(samples, &scores, h, skip).iter().sum();
    let pairs = if skip { k * (k - 1) } else { k * k };
    Ok(total / pairs as f64)
}

/// `KL(q_t || pi)` for `t = 0..=steps` under the exact evolution `q_{t+1} = q_t M`.
pub fn lemma1_monotonicity_check(
    transition: &[Vec<f64>],
    stationary: &[f64],
    q0: &[f64],
    steps: usize,
) -> Result<Vec<f64>> {
    let chain = FiniteChain::new(stationary.to_vec(), transition.to_vec())?;
    chain.kl_trajectory(q0, steps)
}

/// Steps where the sequence rises by more than `slack`.
pub fn count_increases(values: &[f64], slack: f64) -> usize {
    values.windows(2).filter(|w| w[1] > w[0] + slack).count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveMetrics {
    /// Mean log predictive probability of the test labels, in nats.
    pub log_likelihood: f64,
    /// Fraction misclassified; a predictive probability of exactly 0.5 predicts class 1.
    pub error: f64,
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn check_test_set(features: &Tensor, labels: &[f64]) -> Result<()> {
    if labels.is_empty() {
        return Err(AmcError::Config("empty test set".into()));
    }
    if features.rows() != labels.len() {
        return Err(AmcError::dimension("test set", &[labels.len()], &[features.rows()]));
    }
    Ok(())
}

/// Metrics of the Bayesian model average over the weight vectors in `weights`.
pub fn predictive_metrics(
    weights: &SampleBatch,
    arch: BnnArchitecture,
    features: &Tensor,
    labels: &[f64],
) -> Result<PredictiveMetrics> {
    check_test_set(features, labels)?;
    if weights.dim() != arch.num_params() {
        return Err(AmcError::dimension("BNN weight sample", &[arch.num_params()], &[weights.dim()]));
    }
    let logits: Vec<Vec<f64>> = weights.iter().map(|z| arch.logits(z, features)).collect();
    let log_s = (weights.len() as f64).ln();
    let mut ll = 0.0;
    let mut wrong = 0usize;
    for (n, &y) in labels.iter().enumerate() {
        let pos: Vec<f64> = logits.iter().map(|f| log_sigmoid(f[n])).collect();
        let neg: Vec<f64> = logits.iter().map(|f| log_sigmoid(-f[n])).collect();
        let log_p1 = log_sum_exp(&pos) - log_s;
        let log_p0 = log_sum_exp(&neg) - log_s;
        ll += if y == 1.0 { log_p1 } else { log_p0 };
        let predicted = if log_p1.exp() >= 0.5 { 1.0 } else { 0.0 };
        wrong += usize::from(predicted != y);
    }
    let n = labels.len() as f64;
    Ok(PredictiveMetrics {
        log_likelihood: ll / n,
        error: wrong as f64 / n,
    })
}

/// A predictor that always outputs the training label frequency.
pub fn label_frequency_metrics(train_labels: &[f64], test_labels: &[f64]) -> Result<PredictiveMetrics> {
    if train_labels.is_empty() || test_labels.is_empty() {
        return Err(AmcError::Config("empty label set".into()));
    }
    let p = train_labels.iter().sum::<f64>() / train_labels.len() as f64;
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    let predicted = if p >= 0.5 { 1.0 } else { 0.0 };
    let n = test_labels.len() as f64;
    let ll = test_labels
        .iter()
        .map(|&y| if y == 1.0 { p.ln() } else { (1.0 - p).ln() })
        .sum::<f64>()
        / n;
    let err = test_labels.iter().filter(|&&y| y != predicted).count() as f64 / n;
    Ok(PredictiveMetrics {
        log_likelihood: ll,
        error: err,
    })
}

/// Fractions of `samples` in `(-inf, b0), [b0, b1), ..., [b_last, inf)`.
pub fn mode_coverage(samples: &[f64], boundaries: &[f64]) -> Vec<f64> {
    let mut counts = vec![0usize; boundaries.len() + 1];
    for &s in samples {
        let region = boundaries.iter().take_while(|&&b| s >= b).count();
        counts[region] += 1;
    }
    let n = samples.len().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Provenance;
    use crate::targets::{DiagGaussian, GaussianMixture1D};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn batch(rows: &[Vec<f64>]) -> SampleBatch {
        SampleBatch::from_rows(rows, Provenance::StudentInitial).unwrap()
    }

    #[test]
    fn repeated_point_collapses_to_diagonal_term() {
        let target = GaussianMixture1D::default();
        let x0 = 1.3;
        let b = batch(&vec![vec![x0]; 4]);
        let v = ksd(&b, &target, &KsdConfig::v_statistic()).unwrap();
        let s = target.grad_log_pdf(x0);
        // all points identical: bandwidth falls back to 1, u(x, x) = s^2 + d
        assert_relative_eq!(v, s * s + 1.0, epsilon = 1e-12);
        assert!(v >= 0.0);
    }

    #[test]
    fn three_point_double_sum() {
        let target = DiagGaussian::standard(2);
        let pts = [vec![0.1, -0.4], vec![1.2, 0.3], vec![-0.8, 0.9]];
        let b = batch(&pts);
        let h = 0.9;
        // hand-expanded RBF Stein kernel with s(x) = -x
        let u = |x: &[f64], y: &[f64]| -> f64 {
            let r2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
            let k = (-r2 / (2.0 * h * h)).exp();
            let (sx, sy) = ([-x[0], -x[1]], [-y[0], -y[1]]);
            let t1 = k * (sx[0] * sy[0] + sx[1] * sy[1]);
            let grad_y = [k * (x[0] - y[0]) / (h * h), k * (x[1] - y[1]) / (h * h)];
            let grad_x = [-grad_y[0], -grad_y[1]];
            let t2 = sx[0] * grad_y[0] + sx[1] * grad_y[1];
            let t3 = sy[0] * grad_x[0] + sy[1] * grad_x[1];
            let t4 = k * (2.0 / (h * h) - r2 / h.powi(4));
            t1 + t2 + t3 + t4
        };
        let mut v = 0.0;
        let mut uu = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let val = u(&pts[i], &pts[j]);
                v += val;
                if i != j {
                    uu += val;
                }
            }
        }
        let cfg = KsdConfig::v_statistic().with_bandwidth(h);
        assert_relative_eq!(ksd(&b, &target, &cfg).unwrap(), v / 9.0, epsilon = 1e-12);
        let cfg = KsdConfig::u_statistic().with_bandwidth(h);
        assert_relative_eq!(ksd(&b, &target, &cfg).unwrap(), uu / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_samples_beat_shifted_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs: Vec<Vec<f64>> = (0..5000).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let shifted: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 2.0]).collect();
        let target = DiagGaussian::standard(1);
        let cfg = KsdConfig::v_statistic();
        let good = ksd(&batch(&xs), &target, &cfg).unwrap();
        let bad = ksd(&batch(&shifted), &target, &cfg).unwrap();
        assert!(bad > 10.0 * good, "{good} vs {bad}");

        let u = ksd(&batch(&xs), &target, &KsdConfig::u_statistic()).unwrap();
        assert!((good - u).abs() < 10.0 / 5000.0);
    }

    #[test]
    fn ksd_needs_two_samples() {
        let target = DiagGaussian::standard(1);
        assert!(ksd(&batch(&[vec![0.0]]), &target, &KsdConfig::default()).is_err());
    }

    #[test]
    fn lemma1_cases() {
        let m = vec![vec![0.9, 0.1], vec![0.2, 0.8]];
        let pi = [2.0 / 3.0, 1.0 / 3.0];
        let at_pi = lemma1_monotonicity_check(&m, &pi, &pi, 20).unwrap();
        assert!(at_pi.iter().all(|v| v.abs() < 1e-12));

        for q0 in [[1.0, 0.0], [0.0, 1.0], [0.3, 0.7]] {
            let kl = lemma1_monotonicity_check(&m, &pi, &q0, 50).unwrap();
            assert_eq!(count_increases(&kl, 1e-12), 0);
        }

        let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let kl = lemma1_monotonicity_check(&identity, &[0.5, 0.5], &[0.9, 0.1], 10).unwrap();
        assert!(kl.iter().all(|&v| v == kl[0]));
    }

    #[test]
    fn lemma1_rejects_zero_support() {
        let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(lemma1_monotonicity_check(&identity, &[1.0, 0.0], &[0.5, 0.5], 3).is_err());
    }

    fn tiny_arch() -> BnnArchitecture {
        BnnArchitecture::new(1, 1)
    }

    /// Weights `[w1, b1, w2, b2]` giving logit `w2 relu(w1 x + b1) + b2`.
    fn weights(rows: &[[f64; 4]]) -> SampleBatch {
        batch(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn zero_weights_give_half() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let labels = [1.0, 0.0, 0.0, 0.0];
        let m = predictive_metrics(&weights(&[[0.0; 4]]), tiny_arch(), &x, &labels).unwrap();
        assert_relative_eq!(m.log_likelihood, 0.5f64.ln(), epsilon = 1e-14);
        // everything predicted as class 1 on the tie
        assert_eq!(m.error, 0.75);
    }

    #[test]
    fn separating_weights_have_no_error() {
        let x = Tensor::from_rows(&[[-2.0], [-1.0], [1.0], [2.0]]).unwrap();
        let labels = [0.0, 0.0, 1.0, 1.0];
        // logit = 10 relu(x) - 5
        let m = predictive_metrics(&weights(&[[1.0, 0.0, 10.0, -5.0]]), tiny_arch(), &x, &labels).unwrap();
        assert_eq!(m.error, 0.0);
    }

    #[test]
    fn hand_built_ensemble() {
        let x = Tensor::from_rows(&[[0.5], [-1.0], [2.0], [0.0]]).unwrap();
        let labels = [1.0, 0.0, 1.0, 0.0];
        let w = [[1.0, 0.0, 2.0, -0.5], [-1.0, 0.5, 1.0, 0.2], [0.5, 0.5, -1.0, 1.0]];
        let m = predictive_metrics(&weights(&w), tiny_arch(), &x, &labels).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut ll = 0.0;
        let mut err = 0.0;
        for n in 0..4 {
            let xn = x.get(n, 0);
            let p = w
                .iter()
                .map(|r| sig(r[2] * (r[0] * xn + r[1]).max(0.0) + r[3]))
                .sum::<f64>()
                / 3.0;
            ll += if labels[n] == 1.0 { p.ln() } else { (1.0 - p).ln() };
            let pred = if p >= 0.5 { 1.0 } else { 0.0 };
            if pred != labels[n] {
                err += 1.0;
            }
        }
        assert_relative_eq!(m.log_likelihood, ll / 4.0, epsilon = 1e-12);
        assert_relative_eq!(m.error, err / 4.0);

        let reversed: Vec<[f64; 4]> = w.iter().rev().copied().collect();
        let m2 = predictive_metrics(&weights(&reversed), tiny_arch(), &x, &labels).unwrap();
        assert_relative_eq!(m.log_likelihood, m2.log_likelihood, epsilon = 1e-14);
        assert_eq!(m.error, m2.error);
    }

    #[test]
    fn empty_test_set_is_config_error() {
        let r = predictive_metrics(&weights(&[[0.0; 4]]), tiny_arch(), &Tensor::zeros(&[0, 1]), &[]);
        assert!(matches!(r, Err(AmcError::Config(_))));
    }

    #[test]
    fn coverage_cases() {
        assert_eq!(mode_coverage(&[-1.0, 1.0, -2.0, 2.0], &[0.0]), vec![0.5, 0.5]);
        assert_eq!(mode_coverage(&[-1.0, -3.0], &[0.0]), vec![1.0, 0.0]);
        let gmm = GaussianMixture1D::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<f64> = (0..10_000).map(|_| gmm.sample(&mut rng)).collect();
        for f in mode_coverage(&xs, &[0.0]) {
            assert!((0.47..=0.53).contains(&f));
        }
    }

    #[test]
    fn label_frequency_baseline() {
        let m = label_frequency_metrics(&[1.0, 1.0, 0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_relative_eq!(m.log_likelihood, 0.5 * (0.75f64.ln() + 0.25f64.ln()), epsilon = 1e-14);
        assert_eq!(m.error, 0.5);
    }
}
