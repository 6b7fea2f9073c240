use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Nonlinearity applied after every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    /// `1 × fan_out`.
    pub bias: Tensor,
}

/// Fully connected network; the output layer is always linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`. Weights and biases are drawn from
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(
            sizes.len() >= 2,
            "an MLP needs at least input and output sizes"
        );
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                };
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)),
                    bias: Tensor::matrix(1, fan_out, draw(fan_out)),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Self {
        Self { layers, activation }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    /// Parameters in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Names matching [`Mlp::params`], prefixed with `prefix`.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("{prefix}.w{i}"), format!("{prefix}.b{i}")])
            .collect()
    }

    /// Plain forward pass without recording anything.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.as_matrix();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            if h.cols() != l.weight.rows() {
                return Err(shape_err(
                    "Mlp::forward",
                    format!(
                        "input has {} features, layer {i} expects {}",
                        h.cols(),
                        l.weight.rows()
                    ),
                ));
            }
            h = h.matmul(&l.weight)?;
            let c = h.cols();
            for (j, v) in h.data_mut().iter_mut().enumerate() {
                *v += l.bias.data()[j % c];
            }
            if i < last && self.activation == Activation::Tanh {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }

    /// Places the parameters on `tape` so a forward pass can be differentiated.
    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
            .collect();
        BoundMlp {
            vars,
            activation: self.activation,
        }
    }
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.vars.len() - 1;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if i < last && self.activation == Activation::Tanh {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Parameter handles in the same order as [`Mlp::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = Mlp::new(&[16, 4], Activation::Tanh, &mut rng);
        assert!(m
            .params()
            .iter()
            .all(|p| p.data().iter().all(|v| v.abs() <= 0.25)));
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[3, 5, 2], Activation::Tanh, &mut rng);
        let x = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.9, 1.2, 0.0, -0.3]);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = bound.forward(&mut tape, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&m.forward(&x).unwrap()) < 1e-15);
    }

    #[test]
    fn wrong_input_width_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Mlp::new(&[3, 2], Activation::Identity, &mut rng);
        assert!(m.forward(&Tensor::zeros(1, 4)).is_err());
    }
}
