//! Posterior over the weights of a one-hidden-layer binary classifier.
//!
//! The weight vector `z` is laid out as `[W1 (d_in x hidden), b1 (hidden),
//! W2 (hidden x 1), b2 (1)]`, row-major. Every entry, biases included, gets
//! the same isotropic Gaussian prior.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::TargetDensity;
use crate::autodiff::{Tape, Var};
use crate::error::{AmcError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnnArchitecture {
    pub d_in: usize,
    pub hidden: usize,
}

impl BnnArchitecture {
    pub fn new(d_in: usize, hidden: usize) -> Self {
        Self { d_in, hidden }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.hidden + 2 * self.hidden + 1
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.d_in * self.hidden;
        (w1, w1 + self.hidden, w1 + 2 * self.hidden)
    }

    /// Output logits for every row of `x`, evaluated directly.
    pub fn logits(&self, z: &[f64], x: &Tensor) -> Vec<f64> {
        let (b1_at, w2_at, b2_at) = self.offsets();
        let h = self.hidden;
        let mut hidden = vec![0.0; h];
        (0..x.rows())
            .map(|n| {
                let row = x.row(n);
                hidden.copy_from_slice(&z[b1_at..b1_at + h]);
                for (i, &xi) in row.iter().enumerate() {
                    let w = &z[i * h..(i + 1) * h];
                    for (a, wj) in hidden.iter_mut().zip(w) {
                        *a += xi * wj;
                    }
                }
                let mut out = z[b2_at];
                for (a, w) in hidden.iter().zip(&z[w2_at..w2_at + h]) {
                    out += a.max(0.0) * w;
                }
                out
            })
            .collect()
    }

    /// Logits on the tape; `z` is a flat `[num_params]` node and the result is `[N, 1]`.
    pub fn logits_var<'t>(&self, tape: &'t Tape, z: Var<'t>, x: &Tensor) -> Result<Var<'t>> {
        let (b1_at, w2_at, b2_at) = self.offsets();
        let h = self.hidden;
        let w1 = z.slice(0, &[self.d_in, h])?;
        let b1 = z.slice(b1_at, &[h])?;
        let w2 = z.slice(w2_at, &[h, 1])?;
        let b2 = z.slice(b2_at, &[1])?;
        let xv = tape.leaf(x.clone());
        let hidden = xv.matmul(w1)?.add_bias(b1)?.relu();
        hidden.matmul(w2)?.add_bias(b2)
    }
}

#[derive(Clone, Debug)]
pub struct BnnPosterior {
    arch: BnnArchitecture,
    features: Tensor,
    labels: Vec<f64>,
    prior_std: f64,
    likelihood_scale: f64,
}

impl BnnPosterior {
    /// `features` is `N x d_in`, `labels` are 0/1.
    pub fn new(
        arch: BnnArchitecture,
        features: Tensor,
        labels: Vec<f64>,
        prior_std: f64,
    ) -> Result<Self> {
        if labels.is_empty() || features.numel() == 0 {
            return Err(AmcError::Config("BNN posterior needs a non-empty dataset".into()));
        }
        if features.rows() != labels.len() || features.cols() != arch.d_in {
            return Err(AmcError::dimension(
                "BNN dataset",
                &[labels.len(), arch.d_in],
                &[features.rows(), features.cols()],
            ));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(AmcError::Config("BNN labels must be 0 or 1".into()));
        }
        if !(prior_std > 0.0) {
            return Err(AmcError::Config("prior std must be positive".into()));
        }
        Ok(Self {
            arch,
            features,
            labels,
            prior_std,
            likelihood_scale: 1.0,
        })
    }

    /// Posterior restricted to the rows `indices`, with the likelihood rescaled by `N / batch`.
    pub fn minibatch(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(AmcError::Config("empty minibatch".into()));
        }
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.features.row(i)).collect();
        let mut out = Self::new(
            self.arch,
            Tensor::from_rows(&rows)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.prior_std,
        )?;
        out.likelihood_scale = self.labels.len() as f64 / indices.len() as f64;
        Ok(out)
    }

    pub fn architecture(&self) -> BnnArchitecture {
        self.arch
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.arch.num_params() {
            return Err(AmcError::dimension(
                "BNN weight vector",
                &[self.arch.num_params()],
                &[z.len()],
            ));
        }
        Ok(())
    }

    /// Log prior plus Bernoulli log likelihood, recorded on `tape`.
    pub fn log_joint_var<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let d = self.arch.num_params() as f64;
        let var = self.prior_std * self.prior_std;
        let prior = z
            .mul(z)?
            .sum()
            .scale(-0.5 / var)
            .add_scalar(-0.5 * d * (2.0 * PI * var).ln());
        let logits = self.arch.logits_var(tape, z, &self.features)?;
        let y = tape.leaf(Tensor::matrix(self.labels.len(), 1, self.labels.clone())?);
        // y log s(f) + (1 - y) log(1 - s(f)) = y f - softplus(f)
        let lik = y.mul(logits)?.sub(logits.softplus())?.sum();
        prior.add(lik.scale(self.likelihood_scale))
    }

    pub fn log_joint(&self, z: &[f64]) -> Result<f64> {
        Ok(self.log_joint_and_grad(z)?.0)
    }

    /// Log joint and its gradient by a hand-written backward pass; agrees with
    /// [`Self::log_joint_var`] and is several times faster than going through a tape.
    pub fn log_joint_and_grad(&self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(z)?;
        let b1_at = self.arch.offsets().0;
        let h = self.arch.hidden;
        let var = self.prior_std * self.prior_std;
        let mut value = -0.5 * z.len() as f64 * (2.0 * PI * var).ln();
        let mut grad: Vec<f64> = z.iter().map(|w| -w / var).collect();
        value -= 0.5 * z.iter().map(|w| w * w).sum::<f64>() / var;

        let scale = self.likelihood_scale;
        let (w1, rest) = z.split_at(b1_at);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        let (g_w1, g_rest) = grad.split_at_mut(b1_at);
        let (g_b1, g_rest) = g_rest.split_at_mut(h);
        let (g_w2, g_b2) = g_rest.split_at_mut(h);
        let mut pre = vec![0.0; h];
        let mut dh = vec![0.0; h];
        for (n, &y) in self.labels.iter().enumerate() {
            let row = self.features.row(n);
            pre.copy_from_slice(b1);
            for (&xi, w) in row.iter().zip(w1.chunks_exact(h)) {
                for (a, wj) in pre.iter_mut().zip(w) {
                    *a += xi * wj;
                }
            }
            for a in pre.iter_mut() {
                *a = a.max(0.0);
            }
            let f = b2[0] + pre.iter().zip(w2).map(|(a, w)| a * w).sum::<f64>();
            // y f - softplus(f); derivative y - sigmoid(f)
            let softplus = if f > 0.0 { f + (-f).exp().ln_1p() } else { f.exp().ln_1p() };
            value += scale * (y * f - softplus);
            let df = scale * (y - 1.0 / (1.0 + (-f).exp()));
            g_b2[0] += df;
            for (((g, d), a), w) in g_w2.iter_mut().zip(dh.iter_mut()).zip(&pre).zip(w2) {
                *g += df * a;
                *d = if *a > 0.0 { df * w } else { 0.0 };
            }
            for (g, d) in g_b1.iter_mut().zip(&dh) {
                *g += d;
            }
            for (&xi, g) in row.iter().zip(g_w1.chunks_exact_mut(h)) {
                for (gj, d) in g.iter_mut().zip(&dh) {
                    *gj += xi * d;
                }
            }
        }
        Ok((value, grad))
    }

    pub fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_joint_and_grad(z)?.1)
    }
}

impl TargetDensity for BnnPosterior {
    fn dim(&self) -> usize {
        self.arch.num_params()
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        self.log_joint(z).expect("BNN weight vector has the wrong length")
    }

    fn grad_log_density(&self, z: &[f64]) -> Vec<f64> {
        self.grad_log_joint(z).expect("BNN weight vector has the wrong length")
    }

    fn value_and_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        self.log_joint_and_grad(z).expect("BNN weight vector has the wrong length")
    }
}
