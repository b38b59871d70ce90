use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hidden-layer activation. Outputs are always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    Tanh,
}

/// Fully connected network description: `sizes` chains input through hidden
/// layers to the output. Parameters live in a `ParamStore` under
/// `{prefix}/l{i}/w` (shape `[out, in]`) and `{prefix}/l{i}/b`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        MlpSpec { prefix: prefix.into(), sizes, activation: Activation::Elu }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}/l{layer}/w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}/l{layer}/b", self.prefix)
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|l| [self.weight_name(l), self.bias_name(l)])
            .collect()
    }

    /// He-initialized hidden layers; the final layer is zeroed so a fresh
    /// network outputs exactly zero.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let last = l == self.num_layers() - 1;
            let data = if last {
                vec![0.0; fan_out * fan_in]
            } else {
                let scale = (2.0 / fan_in as f64).sqrt();
                (0..fan_out * fan_in).map(|_| gaussian(rng) * scale).collect()
            };
            store.insert(&self.weight_name(l), Tensor::matrix(fan_out, fan_in, data));
            store.insert(&self.bias_name(l), Tensor::vector(vec![0.0; fan_out]));
        }
    }

    /// Plain forward pass for rollouts and evaluation; no graph is recorded.
    pub fn forward_plain(&self, store: &ParamStore, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", self.prefix),
                expected: vec![self.input_dim()],
                got: vec![input.len()],
            });
        }
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let w = self.layer_tensor(store, &self.weight_name(l))?;
            let b = self.layer_tensor(store, &self.bias_name(l))?;
            let (out, inp) = (w.shape[0], w.shape[1]);
            if inp != x.len() || b.len() != out {
                return Err(Error::ShapeMismatch {
                    context: format!("{} layer {l}", self.prefix),
                    expected: vec![out, x.len()],
                    got: w.shape.clone(),
                });
            }
            let mut y = vec![0.0; out];
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w.data[o * inp..(o + 1) * inp];
                let mut acc = b.data[o];
                for (wv, xv) in row.iter().zip(&x) {
                    acc += wv * xv;
                }
                *yo = acc;
            }
            if l + 1 < self.num_layers() {
                for v in &mut y {
                    *v = match self.activation {
                        Activation::Elu => {
                            if *v > 0.0 {
                                *v
                            } else {
                                v.exp_m1()
                            }
                        }
                        Activation::Tanh => v.tanh(),
                    };
                }
            }
            x = y;
        }
        Ok(x)
    }

    /// Taped forward pass; `x` may be a single row `[in]` or a batch
    /// `[B, in]`. Parameters bind trainable or frozen.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        trainable: bool,
    ) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", self.prefix),
                expected: vec![self.input_dim()],
                got: tape.value(x).shape.clone(),
            });
        }
        let mut h = x;
        for l in 0..self.num_layers() {
            let wn = self.weight_name(l);
            let bn = self.bias_name(l);
            if !store.contains(&wn) || !store.contains(&bn) {
                return Err(Error::UnknownParam(wn));
            }
            let (w, b) = if trainable {
                (tape.param(store, &wn), tape.param(store, &bn))
            } else {
                (tape.frozen_param(store, &wn), tape.frozen_param(store, &bn))
            };
            h = tape.linear(h, w, b);
            if l + 1 < self.num_layers() {
                h = match self.activation {
                    Activation::Elu => tape.elu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    fn layer_tensor<'s>(&self, store: &'s ParamStore, name: &str) -> Result<&'s Tensor> {
        store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }
}

/// Box-Muller standard normal draw from the given stream.
pub(crate) fn gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > f64::EPSILON {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}
