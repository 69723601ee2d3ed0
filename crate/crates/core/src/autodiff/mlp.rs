//! Fully connected networks with ReLU hidden activations and identity output.
//!
//! The same affine/ReLU kernels back both the plain forward (used for
//! sampling and evaluation) and the taped forward (used for training), so the
//! two paths produce bit-identical values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::{affine_forward, relu_forward, Tensor};
use crate::error::{Error, Result};

/// Layer layout of an MLP. `layers` counts the fully connected layers; the
/// first maps `input -> hidden`, the last `hidden -> output` (a single-layer
/// net maps `input -> output` directly).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: usize, output: usize, layers: usize) -> Self {
        MlpSpec { input, hidden, output, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Usage("mlp needs at least one layer".into()));
        }
        if self.input == 0 || self.output == 0 || (self.layers > 1 && self.hidden == 0) {
            return Err(Error::Usage(format!("mlp spec has zero-width layer: {self:?}")));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.layers)
            .map(|l| {
                let fan_in = if l == 0 { self.input } else { self.hidden };
                let fan_out = if l + 1 == self.layers { self.output } else { self.hidden };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| o * i + o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    /// Weight matrix per layer, shaped [fan_out, fan_in].
    pub weights: Vec<Tensor>,
    /// Bias row per layer, shaped [1, fan_out].
    pub biases: Vec<Tensor>,
}

/// Tape handles for one registered MLP.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl Mlp {
    /// Uniform(+/- sqrt(6/(fan_in+fan_out))) weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.layers);
        let mut biases = Vec::with_capacity(spec.layers);
        for (fan_in, fan_out) in spec.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_out * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            weights.push(Tensor::from_vec(fan_out, fan_in, data)?);
            biases.push(Tensor::zeros(1, fan_out));
        }
        Ok(Mlp { spec, weights, biases })
    }

    /// Builds an MLP from existing tensors, validating shapes against `spec`.
    pub fn from_parts(spec: MlpSpec, weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if weights.len() != dims.len() || biases.len() != dims.len() {
            return Err(Error::Mismatch(format!(
                "expected {} layers, got {} weights / {} biases",
                dims.len(),
                weights.len(),
                biases.len()
            )));
        }
        for (l, (fan_in, fan_out)) in dims.iter().enumerate() {
            if weights[l].shape() != (*fan_out, *fan_in) || biases[l].shape() != (1, *fan_out) {
                return Err(Error::Mismatch(format!(
                    "layer {l} shapes {:?}/{:?} do not match spec {:?}",
                    weights[l].shape(),
                    biases[l].shape(),
                    spec
                )));
            }
        }
        Ok(Mlp { spec, weights, biases })
    }

    pub fn spec(&self) -> MlpSpec {
        self.spec
    }

    /// Plain forward pass: ReLU on hidden layers, identity on the output.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = affine_forward(x, &self.weights[0], &self.biases[0])?;
        for l in 1..self.spec.layers {
            h = relu_forward(&h);
            h = affine_forward(&h, &self.weights[l], &self.biases[l])?;
        }
        Ok(h)
    }

    /// Registers parameters on `tape` as gradient leaves.
    pub fn register_params(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// Registers parameters as constants (frozen model).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    /// Taped forward pass mirroring [`Mlp::forward`].
    pub fn forward_on(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let mut h = tape.affine(x, vars.weights[0], vars.biases[0])?;
        for l in 1..self.spec.layers {
            h = tape.relu(h);
            h = tape.affine(h, vars.weights[l], vars.biases[l])?;
        }
        Ok(h)
    }

    /// Stable parameter ordering shared by optimizers and checkpoints:
    /// weight then bias, layer by layer.
    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.spec.layers {
            names.push(format!("{prefix}.layer{l}.w"));
            names.push(format!("{prefix}.layer{l}.b"));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.spec.layers);
        for l in 0..self.spec.layers {
            out.push(&self.weights[l]);
            out.push(&self.biases[l]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.spec.layers);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Gradient tensors for this MLP's vars in [`Mlp::params`] order.
    pub fn collect_grads(
        &self,
        vars: &MlpVars,
        grads: &mut crate::autodiff::tape::Gradients,
    ) -> Vec<Tensor> {
        let mut out = Vec::with_capacity(2 * self.spec.layers);
        for l in 0..self.spec.layers {
            let (wr, wc) = self.weights[l].shape();
            out.push(grads.take_or_zeros(vars.weights[l], wr, wc));
            let (br, bc) = self.biases[l].shape();
            out.push(grads.take_or_zeros(vars.biases[l], br, bc));
        }
        out
    }
}
