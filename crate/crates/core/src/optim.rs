//! Adam.

use crate::error::{AmcError, Result};
use crate::params::ParamSet;

/// Adam moment estimates for one parameter set.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Option<ParamSet>,
    second: Option<ParamSet>,
    step: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: None,
            second: None,
            step: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of completed steps.
    pub fn time(&self) -> u64 {
        self.step
    }

    /// Returns `params` moved one Adam step against `grads` (descent).
    ///
    /// A non-finite gradient aborts the step without touching the state.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet, lr: f64) -> Result<ParamSet> {
        if !params.same_layout(grads) {
            return Err(AmcError::Contract(
                "gradient layout does not match parameters".into(),
            ));
        }
        if !(lr >= 0.0) {
            return Err(AmcError::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, g) in grads.iter() {
            if !g.all_finite() {
                return Err(AmcError::NonFiniteGradient {
                    param: name.to_string(),
                });
            }
        }
        let m = self.first.get_or_insert_with(|| params.zeros_like());
        let v = self.second.get_or_insert_with(|| params.zeros_like());
        if !m.same_layout(params) {
            return Err(AmcError::Contract(
                "optimiser state layout does not match parameters".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);

        let mut out = params.clone();
        let iter = out
            .iter_mut()
            .zip(grads.iter())
            .zip(m.iter_mut().zip(v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
            let p = p.values_mut();
            let m = m.values_mut();
            let v = v.values_mut();
            for (i, &gi) in g.values().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(out)
    }
}
