use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::DenseTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Identity,
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored `[out × in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: DenseTensor,
    pub bias: DenseTensor,
}

impl Linear {
    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    /// Fan-in uniform initialization, `U(±√(3/fan_in))`, zero bias.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (3.0 / in_dim.max(1) as f64).sqrt();
        let values = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self {
            weight: DenseTensor {
                shape: vec![out_dim, in_dim],
                values,
                requires_grad: true,
                grad: None,
            },
            bias: DenseTensor::zeros(vec![out_dim]).with_grad(),
        }
    }
}

/// Multilayer perceptron. Hidden layers use `activation`; the last layer is
/// always a raw linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub hidden_dim: usize,
}

impl Mlp {
    /// `n_hidden` hidden layers of width `hidden_dim` between `in_dim` and `out_dim`.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        n_hidden: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden_dim, n_hidden));
        dims.push(out_dim);
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self {
            layers,
            activation,
            hidden_dim,
        }
    }

    pub fn from_layers(layers: Vec<Linear>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape {
                    context: "Mlp::from_layers (layer chaining)",
                    expected: pair[0].out_dim(),
                    actual: pair[1].in_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.numel() != l.out_dim() {
                return Err(Error::Shape {
                    context: "Mlp::from_layers (bias length)",
                    expected: l.out_dim(),
                    actual: l.bias.numel(),
                });
            }
            if !l.weight.is_finite() || !l.bias.is_finite() {
                return Err(Error::NonFinite("MLP parameters".into()));
            }
        }
        let hidden_dim = layers[0].out_dim();
        Ok(Self {
            layers,
            activation,
            hidden_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Weight then bias for each layer, in layer order.
    pub fn params(&self) -> Vec<&DenseTensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundMlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = tape
                    .leaf(l.out_dim(), l.in_dim(), l.weight.values.clone())
                    .expect("weight shape checked at construction");
                let b = tape
                    .leaf(1, l.out_dim(), l.bias.values.clone())
                    .expect("bias shape checked at construction");
                (w, b)
            })
            .collect();
        BoundMlp {
            layers,
            activation: self.activation,
            in_dim: self.in_dim(),
        }
    }
}

/// An [`Mlp`] whose parameters are leaves on a particular tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    activation: Activation,
    in_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (_, cols) = tape.dims(x);
        if cols != self.in_dim {
            return Err(Error::Shape {
                context: "mlp_forward (input last dim vs first layer in-dim)",
                expected: self.in_dim,
                actual: cols,
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul_t(h, w)?;
            h = tape.add_row(h, b)?;
            if k < last && self.activation == Activation::Swish {
                h = tape.swish(h);
            }
        }
        Ok(h)
    }

    /// Parameter leaves in the same order as [`Mlp::params`].
    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Forward pass on a `[rows × in]` row-major input without gradient tracking.
pub fn mlp_forward(params: &Mlp, input: &[f64], rows: usize) -> Result<Vec<f64>> {
    let in_dim = params.in_dim();
    if rows * in_dim != input.len() {
        return Err(Error::Shape {
            context: "mlp_forward (input last dim vs first layer in-dim)",
            expected: in_dim,
            actual: if rows == 0 { 0 } else { input.len() / rows },
        });
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.leaf(rows, in_dim, input.to_vec())?;
    let y = bound.forward(&mut tape, x)?;
    Ok(tape.value(y).to_vec())
}
