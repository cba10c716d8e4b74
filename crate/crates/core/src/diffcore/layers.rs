// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// `input · weight + bias`, with `bias` broadcast over rows.
pub fn affine(input: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let w = tape.leaf(weight.clone());
    let b = tape.leaf(Tensor2::row_vector(bias));
    let y = affine_var(&mut tape, x, w, b)?;
    Ok(tape.value(y).clone())
}

pub fn affine_var(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Fully connected layer; `weight` is stored input-major (in × out).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.random_range(-limit..limit)).collect();
        Linear {
            weight: Tensor2::from_vec(inputs, outputs, data).expect("sized above"),
            bias: Tensor2::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Tensor2::zeros(inputs, outputs),
            bias: Tensor2::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        affine_var(tape, x, self.weight, self.bias)
    }
}

/// Stack of affine layers with a shared hidden activation and a linear
/// output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], hidden_activation: Activation, rng: &mut R) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Ok(Mlp {
            layers,
            hidden_activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            hidden_activation: self.hidden_activation,
        }
    }

    /// Forward pass on a throwaway tape.
    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(input.clone());
        let y = bound.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn tensors(&self) -> Vec<&Tensor2> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
    pub hidden_activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last {
                h = self.hidden_activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_zero_input_gives_bias_rows() {
        let x = Tensor2::zeros(3, 2);
        let w = Tensor2::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let y = affine(&x, &w, &[0.5, -1.0, 2.0]).unwrap();
        for row in y.iter_rows() {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn affine_identity_and_hand_example() {
        let x = Tensor2::from_rows(&[[1.0, 2.0], [-3.0, 0.25]]).unwrap();
        let y = affine(&x, &Tensor2::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, x);

        let x = Tensor2::row_vector(&[1.0, 2.0]);
        let y = affine(&x, &Tensor2::identity(2), &[1.0, 1.0]).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor2::zeros(1, 3);
        assert!(affine(&x, &Tensor2::identity(2), &[0.0, 0.0]).is_err());
        let x = Tensor2::zeros(1, 2);
        assert!(affine(&x, &Tensor2::identity(2), &[0.0]).is_err());
    }

    #[test]
    fn mlp_forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::init(&[3, 8, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Tensor2::from_rows(&[[0.1, -0.2, 0.3], [1.0, 2.0, 3.0]]).unwrap();
        let a = mlp.forward(&x).unwrap();
        let b = mlp.forward(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.shape(), (2, 2));
    }
}
