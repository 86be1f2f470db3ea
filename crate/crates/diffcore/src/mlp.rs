use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{gemm, Array};
use crate::tape::{Tape, Var};
use crate::{DiffError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
    Elu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
        }
    }

    fn record(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Silu => tape.silu(v),
            Activation::Elu => tape.elu(v),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[fan_in, fan_out]`
    pub weight: Array,
    /// `[fan_out]`
    pub bias: Array,
}

/// Fully connected network; the hidden activation is applied after every
/// layer except the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
}

/// Tape handles for an [`Mlp`]'s parameters, in declaration order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub params: Vec<Var>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases; the final layer's weights are
    /// multiplied by `output_scale`.
    pub fn new<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "widths must be positive");
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let scale = if l + 1 == n_layers { output_scale } else { 1.0 };
                let w = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-limit..limit) * scale)
                    .collect();
                Dense {
                    weight: Array::matrix(fan_in, fan_out, w),
                    bias: Array::zeros(&[fan_out]),
                }
            })
            .collect();
        Self {
            widths: widths.to_vec(),
            activation,
            layers,
        }
    }

    pub fn from_layers(activation: Activation, layers: Vec<Dense>) -> Result<Self> {
        let mut widths = Vec::with_capacity(layers.len() + 1);
        for (i, layer) in layers.iter().enumerate() {
            let s = layer.weight.shape();
            if s.len() != 2 || layer.bias.len() != s[1] {
                return Err(DiffError::InvalidShape(s.to_vec()));
            }
            if i == 0 {
                widths.push(s[0]);
            } else if widths[i] != s[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "Mlp::from_layers",
                    expected: vec![widths[i]],
                    found: vec![s[0]],
                });
            }
            widths.push(s[1]);
        }
        if layers.is_empty() {
            return Err(DiffError::InvalidShape(vec![]));
        }
        Ok(Self {
            widths,
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Parameters in declaration order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Array> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    fn check_input(&self, input: &Array) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(DiffError::ShapeMismatch {
                op: "forward_mlp",
                expected: vec![input.rows(), self.input_dim()],
                found: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Plain forward pass without recording; rows are independent samples.
    pub fn forward(&self, input: &Array) -> Result<Array> {
        let out = self.forward_unchecked(input)?;
        if !out.is_finite() {
            return Err(DiffError::NonFinite("forward_mlp output"));
        }
        Ok(out)
    }

    /// Like [`Mlp::forward`] but leaves non-finite outputs for the caller to
    /// handle row by row.
    pub fn forward_unchecked(&self, input: &Array) -> Result<Array> {
        self.check_input(input)?;
        let m = input.rows();
        let mut x = input.data().to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(layer.bias.data());
            }
            gemm(m, k, n, &x, false, layer.weight.data(), false, &mut out, true);
            if l != last {
                let act = self.activation;
                out.iter_mut().for_each(|v| *v = act.apply(*v));
            }
            x = out;
        }
        Ok(Array::matrix(m, self.output_dim(), x))
    }

    /// Records the forward pass, registering every parameter as a leaf.
    pub fn forward_tape(&self, tape: &mut Tape, input: Var) -> Result<(Var, MlpVars)> {
        self.check_input(tape.value(input))?;
        let mut params = Vec::with_capacity(2 * self.layers.len());
        let mut x = input;
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = tape.param(layer.weight.clone());
            let b = tape.param(layer.bias.clone());
            params.push(w);
            params.push(b);
            x = tape.affine(x, w, b);
            if l != last {
                x = self.activation.record(tape, x);
            }
        }
        if !tape.value(x).is_finite() {
            return Err(DiffError::NonFinite("forward_mlp output"));
        }
        Ok((x, MlpVars { params }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(&[5, 7, 3, 2], Activation::Silu, 1.0, &mut rng);
        assert_eq!(net.param_count(), 5 * 7 + 7 + 7 * 3 + 3 + 3 * 2 + 2);
        let total: usize = net.params().iter().map(|p| p.len()).sum();
        assert_eq!(total, net.param_count());
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, 1.0, &mut rng);
        for p in net.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = net.forward(&Array::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 9.0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn identity_single_layer() {
        let net = Mlp::from_layers(
            Activation::Tanh,
            vec![Dense {
                weight: Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]),
                bias: Array::zeros(&[2]),
            }],
        )
        .unwrap();
        let x = Array::matrix(1, 2, vec![3.5, -1.25]);
        assert_eq!(net.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn matches_straight_line_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = Mlp::new(&[2, 16, 1], Activation::Silu, 1.0, &mut rng);
        let x = [0.37, -1.2];
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        let mut hidden = [0.0; 16];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = l0.bias.data()[j]
                + x[0] * l0.weight.data()[j]
                + x[1] * l0.weight.data()[16 + j];
            *h = z / (1.0 + (-z).exp());
        }
        let mut y = l1.bias.data()[0];
        for (j, h) in hidden.iter().enumerate() {
            y += h * l1.weight.data()[j];
        }
        let out = net.forward(&Array::row(x.to_vec())).unwrap().item();
        assert!((out - y).abs() < 1e-12);

        let mut tape = Tape::new();
        let xin = tape.constant(Array::row(x.to_vec()));
        let (o, _) = net.forward_tape(&mut tape, xin).unwrap();
        assert!((tape.value(o).item() - y).abs() < 1e-12);
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 4, 1], Activation::Elu, 1.0, &mut rng);
        assert!(matches!(
            net.forward(&Array::row(vec![1.0, 2.0])),
            Err(DiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[1, 4, 1], Activation::Identity, 1.0, &mut rng);
        assert!(matches!(
            net.forward(&Array::row(vec![f64::NAN])),
            Err(DiffError::NonFinite(_))
        ));
    }
}
