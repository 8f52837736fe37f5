//! Finite-state Markov chains with exact distribution evolution.

use rand::Rng;

use crate::error::{AmcError, Result};

const STOCHASTIC_TOL: f64 = 1e-12;

/// Row-stochastic transition matrix together with its stationary distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteChain {
    stationary: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

fn check_stochastic(m: &[Vec<f64>]) -> Result<()> {
    let s = m.len();
    for (i, row) in m.iter().enumerate() {
        if row.len() != s {
            return Err(AmcError::Contract(format!("transition row {i} has length {}", row.len())));
        }
        if row.iter().any(|&p| !(p >= 0.0)) {
            return Err(AmcError::Contract(format!("transition row {i} has a negative entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(AmcError::Contract(format!("transition row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn check_simplex(q: &[f64], what: &str) -> Result<()> {
    if q.iter().any(|&p| !(p >= 0.0)) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
        return Err(AmcError::Contract(format!("{what} is not a probability vector")));
    }
    Ok(())
}

fn step(q: &[f64], m: &[Vec<f64>]) -> Vec<f64> {
    let mut next = vec![0.0; q.len()];
    for (qi, row) in q.iter().zip(m) {
        for (n, p) in next.iter_mut().zip(row) {
            *n += qi * p;
        }
    }
    let total: f64 = next.iter().sum();
    next.iter_mut().for_each(|v| *v /= total);
    next
}

/// `q M^steps`, renormalised after each step.
pub fn chain_evolve_exact(q: &[f64], m: &[Vec<f64>], steps: usize) -> Result<Vec<f64>> {
    check_stochastic(m)?;
    if q.len() != m.len() {
        return Err(AmcError::dimension("chain state", &[m.len()], &[q.len()]));
    }
    check_simplex(q, "initial distribution")?;
    let mut cur = q.to_vec();
    for _ in 0..steps {
        cur = step(&cur, m);
    }
    Ok(cur)
}

/// `KL(q || r)` in nats. Infinite when `q` puts mass where `r` has none.
pub fn kl_divergence(q: &[f64], r: &[f64]) -> f64 {
    q.iter()
        .zip(r)
        .map(|(&qi, &ri)| {
            if qi == 0.0 {
                0.0
            } else if ri == 0.0 {
                f64::INFINITY
            } else {
                qi * (qi / ri).ln()
            }
        })
        .sum()
}

impl FiniteChain {
    pub fn new(stationary: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self> {
        check_stochastic(&transition)?;
        if stationary.len() != transition.len() {
            return Err(AmcError::dimension(
                "stationary vector",
                &[transition.len()],
                &[stationary.len()],
            ));
        }
        if stationary.iter().any(|&p| !(p > 0.0))
            || (stationary.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL
        {
            return Err(AmcError::Contract(
                "stationary vector must be positive and sum to 1".into(),
            ));
        }
        let moved = step(&stationary, &transition);
        let drift = moved
            .iter()
            .zip(&stationary)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if drift >= STOCHASTIC_TOL {
            return Err(AmcError::Contract(format!(
                "vector is not stationary for the transition matrix (drift {drift:e})"
            )));
        }
        Ok(Self {
            stationary,
            transition,
        })
    }

    /// A reversible chain `eps I + (1 - eps) MH(pi, Q)` with random `pi` and
    /// random proposal `Q`, so that `pi` is stationary by construction.
    pub fn random_reversible<R: Rng + ?Sized>(states: usize, laziness: f64, rng: &mut R) -> Self {
        assert!(states >= 1, "need at least one state");
        let raw: Vec<f64> = (0..states).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let proposal: Vec<Vec<f64>> = (0..states)
            .map(|_| {
                let row: Vec<f64> = (0..states).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|v| v / s).collect()
            })
            .collect();

        let mut m = vec![vec![0.0; states]; states];
        for i in 0..states {
            let mut off = 0.0;
            for j in 0..states {
                if i == j {
                    continue;
                }
                let ratio = (pi[j] * proposal[j][i]) / (pi[i] * proposal[i][j]);
                let p = (1.0 - laziness) * proposal[i][j] * ratio.min(1.0);
                m[i][j] = p;
                off += p;
            }
            m[i][i] = 1.0 - off;
        }
        Self::new(pi, m).expect("Metropolis construction keeps pi stationary")
    }

    pub fn states(&self) -> usize {
        self.stationary.len()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    pub fn evolve(&self, q: &[f64], steps: usize) -> Result<Vec<f64>> {
        chain_evolve_exact(q, &self.transition, steps)
    }

    /// `KL(q_t || pi)` for `t = 0..=steps`, where `q_t = q0 M^t`.
    pub fn kl_trajectory(&self, q0: &[f64], steps: usize) -> Result<Vec<f64>> {
        if q0.len() != self.states() {
            return Err(AmcError::dimension("initial distribution", &[self.states()], &[q0.len()]));
        }
        check_simplex(q0, "initial distribution")?;
        let mut out = Vec::with_capacity(steps + 1);
        let mut cur = q0.to_vec();
        out.push(kl_divergence(&cur, &self.stationary));
        for _ in 0..steps {
            cur = step(&cur, &self.transition);
            out.push(kl_divergence(&cur, &self.stationary));
        }
        Ok(out)
    }
}
