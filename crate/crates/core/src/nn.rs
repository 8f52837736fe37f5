//! Small dense networks on the tape.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Var};
use crate::error::{AmcError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Slope used whenever a leaky ReLU is requested.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
}

impl std::str::FromStr for Activation {
    type Err = AmcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(AmcError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
        }
    }

    pub fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Xavier-normal weights, zero biases. Weight `i` has shape `[sizes[i], sizes[i+1]]`.
pub fn init_mlp<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Result<ParamSet> {
    if layer_sizes.len() < 2 {
        return Err(AmcError::Config(format!(
            "an MLP needs at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    let mut params = ParamSet::new();
    for (i, pair) in layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        params.insert(weight_name(i), Tensor::matrix(fan_in, fan_out, w)?)?;
        params.insert(bias_name(i), Tensor::zeros(&[fan_out]))?;
    }
    Ok(params)
}

/// Checks that `params` holds exactly the tensors an MLP with `layer_sizes` needs.
pub fn check_mlp_params(params: &ParamSet, layer_sizes: &[usize]) -> Result<()> {
    for (i, pair) in layer_sizes.windows(2).enumerate() {
        let w = params.get(&weight_name(i))?;
        if w.shape() != [pair[0], pair[1]] {
            return Err(AmcError::dimension(
                weight_name(i),
                &[pair[0], pair[1]],
                w.shape(),
            ));
        }
        let b = params.get(&bias_name(i))?;
        if b.shape() != [pair[1]] {
            return Err(AmcError::dimension(bias_name(i), &[pair[1]], b.shape()));
        }
    }
    Ok(())
}

/// Forward pass of a fully connected network; `activation` is applied after
/// every layer except the last.
pub fn forward_mlp<'t>(
    params: &BoundParams<'t>,
    layer_sizes: &[usize],
    activation: Activation,
    input: Var<'t>,
) -> Result<Var<'t>> {
    let in_shape = input.shape();
    let in_cols = in_shape.last().copied().unwrap_or(1);
    if layer_sizes.len() < 2 {
        return Err(AmcError::Config(format!(
            "an MLP needs at least two layer sizes, got {layer_sizes:?}"
        )));
    }
    if in_cols != layer_sizes[0] {
        return Err(AmcError::dimension(
            "mlp input",
            &[layer_sizes[0]],
            &[in_cols],
        ));
    }
    let layers = layer_sizes.len() - 1;
    let mut h = input;
    for i in 0..layers {
        let w = params.get(&weight_name(i))?;
        let b = params.get(&bias_name(i))?;
        let w_shape = w.shape();
        if w_shape != [layer_sizes[i], layer_sizes[i + 1]] {
            return Err(AmcError::dimension(
                weight_name(i),
                &[layer_sizes[i], layer_sizes[i + 1]],
                &w_shape,
            ));
        }
        h = h.matmul(w)?.add_bias(b)?;
        if i + 1 < layers {
            h = activation.apply(h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sizes = [3, 4, 2];
        let params = init_mlp(&sizes, &mut rng).unwrap().zeros_like();
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let x = tape.leaf(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 9.0]]).unwrap());
        let out = forward_mlp(&bound, &sizes, Activation::Relu, x).unwrap();
        assert_eq!(out.shape(), vec![2, 2]);
        assert!(out.value().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let params = ParamSet::new()
            .with(weight_name(0), Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap()
            .with(bias_name(0), Tensor::zeros(&[2]))
            .unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let v = Tensor::from_rows(&[[0.3, -7.0]]).unwrap();
        let out = forward_mlp(&bound, &[2, 2], Activation::Relu, tape.leaf(v.clone())).unwrap();
        assert_eq!(out.value(), v);
    }

    #[test]
    fn matches_hand_rolled_dense_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let sizes = [2, 3, 1];
        let mut params = init_mlp(&sizes, &mut rng).unwrap();
        params.get_mut(&bias_name(0)).unwrap().values_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        params.get_mut(&bias_name(1)).unwrap().values_mut()[0] = -0.05;

        let w0 = params.get(&weight_name(0)).unwrap().values().to_vec();
        let b0 = params.get(&bias_name(0)).unwrap().values().to_vec();
        let w1 = params.get(&weight_name(1)).unwrap().values().to_vec();
        let b1 = params.get(&bias_name(1)).unwrap().values()[0];
        let x = [1.0, 1.0];
        let mut expected = b1;
        for j in 0..3 {
            let pre = x[0] * w0[j] + x[1] * w0[3 + j] + b0[j];
            expected += pre.max(0.0) * w1[j];
        }

        let tape = Tape::new();
        let bound = tape.bind(&params);
        let input = tape.leaf(Tensor::from_rows(&[x]).unwrap());
        let out = forward_mlp(&bound, &sizes, Activation::Relu, input).unwrap();
        assert_relative_eq!(out.item().unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn input_width_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = init_mlp(&[3, 2], &mut rng).unwrap();
        let tape = Tape::new();
        let bound = tape.bind(&params);
        let x = tape.leaf(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            forward_mlp(&bound, &[3, 2], Activation::Relu, x),
            Err(AmcError::Dimension { .. })
        ));
        assert!(check_mlp_params(&params, &[3, 3]).is_err());
        assert!(check_mlp_params(&params, &[3, 2]).is_ok());
    }
}
