use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::{ParamSlot, ParamStore};
use super::tape::{linear_forward, NodeId, Tape};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!(
                "unknown activation `{other}` (expected tanh or relu)"
            ))),
        }
    }
}

/// Parameter initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    Uniform,
    Zero,
}

/// Fully connected network whose parameters live in a [`ParamStore`].
///
/// Hidden layers use their listed activation; the output layer is linear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    slot: ParamSlot,
}

impl Mlp {
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activations: &[Activation],
        init: Init,
        rng: &mut R,
    ) -> Result<Mlp> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!(
                "invalid layer dims {dims:?} for `{name}`"
            )));
        }
        if activations.len() != dims.len() - 2 {
            return Err(Error::Config(format!(
                "`{name}` has {} hidden layers but {} activations",
                dims.len() - 2,
                activations.len()
            )));
        }
        let slot = store.alloc(name, Self::param_count(dims));
        let mlp = Mlp {
            dims: dims.to_vec(),
            activations: activations.to_vec(),
            slot,
        };
        if init == Init::Uniform {
            let values = store.slice_mut(slot);
            let mut off = 0;
            for w in dims.windows(2) {
                let (fan_in, out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                for v in &mut values[off..off + fan_in * out] {
                    *v = rng.gen_range(-bound..bound);
                }
                off += (fan_in + 1) * out;
            }
        }
        Ok(mlp)
    }

    /// Rebuild a network description over an existing slot (checkpoint load).
    pub fn from_parts(
        dims: Vec<usize>,
        activations: Vec<Activation>,
        slot: ParamSlot,
    ) -> Result<Mlp> {
        if dims.len() < 2
            || activations.len() != dims.len() - 2
            || slot.len != Self::param_count(&dims)
        {
            return Err(Error::Config(format!(
                "inconsistent network description: dims {dims:?}, {} activations, {} parameters",
                activations.len(),
                slot.len
            )));
        }
        Ok(Mlp {
            dims,
            activations,
            slot,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn slot(&self) -> ParamSlot {
        self.slot
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    /// (weight offset, bias offset) of layer `l` in the global parameter vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = self.slot.offset;
        for w in self.dims.windows(2).take(l) {
            off += (w[0] + 1) * w[1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(Error::dim("Mlp input", self.input_dim(), cols));
        }
        Ok(())
    }

    /// Record the forward pass of a batch (one row per sample) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape<'_>, x: NodeId) -> Result<NodeId> {
        self.check_input(tape.value(x).cols())?;
        let mut h = x;
        let layers = self.dims.len() - 1;
        for l in 0..layers {
            let (w, b) = self.layer_offsets(l);
            h = tape.linear(h, w, b, self.dims[l + 1])?;
            if l + 1 < layers {
                h = match self.activations[l] {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    /// Tape-free batch evaluation. Produces the same bits as [`Mlp::forward_tape`].
    pub fn eval(&self, params: &[f64], input: &Matrix) -> Result<Matrix> {
        self.check_input(input.cols())?;
        let layers = self.dims.len() - 1;
        let mut h: Option<Matrix> = None;
        for l in 0..layers {
            let (w, b) = self.layer_offsets(l);
            let mut y = linear_forward(params, w, b, h.as_ref().unwrap_or(input), self.dims[l + 1]);
            if l + 1 < layers {
                let act = self.activations[l];
                y.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            }
            h = Some(y);
        }
        Ok(h.expect("at least one layer"))
    }

    pub fn eval_one(&self, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .eval(params, &Matrix::row_vector(input.to_vec()))?
            .into_vec())
    }
}

/// Single-input forward pass that also returns the tape and output node so
/// the caller can run [`Tape::backward`].
pub fn forward<'p>(
    mlp: &Mlp,
    params: &'p [f64],
    input: &[f64],
) -> Result<(Vec<f64>, Tape<'p>, NodeId)> {
    mlp.check_input(input.len())?;
    let mut tape = Tape::new(params);
    let x = tape.leaf(Matrix::row_vector(input.to_vec()));
    let y = mlp.forward_tape(&mut tape, x)?;
    Ok((tape.value(y).data().to_vec(), tape, y))
}
