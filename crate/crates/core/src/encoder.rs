//! MLP encoders `f` (anchors) and `g` (targets).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::memtrace::{self, Category};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::InvalidConfig(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer `x·W + b` followed by its activation.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

/// Parameters of one encoder tower. With no layers the encoder is the
/// identity on `input_dim`-dimensional inputs.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    input_dim: usize,
    layers: Vec<Dense<T>>,
}

/// Output of a forward pass plus the leaves the parameters were bound to.
pub struct Encoded<T> {
    pub output: Tensor<T>,
    pub leaves: Vec<Tensor<T>>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn new(input_dim: usize, layers: Vec<Dense<T>>) -> Result<Self> {
        let mut dim = input_dim;
        for (k, l) in layers.iter().enumerate() {
            let ok = l.weight.ndim() == 2
                && l.weight.shape()[0] == dim
                && l.bias.ndim() == 1
                && l.bias.numel() == l.weight.shape()[1];
            if !ok {
                return Err(Error::shape(
                    "encoder",
                    format!(
                        "layer {k}: weight {:?}, bias {:?} after width {dim}",
                        l.weight.shape(),
                        l.bias.shape()
                    ),
                ));
            }
            dim = l.weight.shape()[1];
        }
        Ok(EncoderParams { input_dim, layers })
    }

    pub fn identity(dim: usize) -> Self {
        EncoderParams { input_dim: dim, layers: Vec::new() }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.weight.shape()[1])
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn num_tensors(&self) -> usize {
        2 * self.layers.len()
    }

    /// `[w0, b0, w1, b1, …]`
    pub fn params(&self) -> Vec<Tensor<T>> {
        self.layers.iter().flat_map(|l| [l.weight.clone(), l.bias.clone()]).collect()
    }

    pub fn with_params(&self, params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.num_tensors() {
            return Err(Error::shape("encoder", "parameter count changed"));
        }
        let mut it = params.into_iter();
        let layers = self
            .layers
            .iter()
            .map(|l| Dense {
                weight: it.next().unwrap().detach(),
                bias: it.next().unwrap().detach(),
                activation: l.activation,
            })
            .collect();
        Self::new(self.input_dim, layers)
    }

    /// Register every parameter as a leaf of `tape`.
    pub fn bind(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| tape.leaf_with_grad_category(p, Category::Parameters)).collect()
    }

    /// Forward pass using previously bound `leaves`.
    pub fn apply(&self, tape: &Tape<T>, leaves: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 2 || x.cols() != self.input_dim {
            return Err(Error::shape(
                "encode",
                format!("input {:?} for encoder of width {}", x.shape(), self.input_dim),
            ));
        }
        memtrace::count_ops(|c| c.encoder_forward_rows += x.rows() as u64);
        let mut h = x.clone();
        for (l, pair) in self.layers.iter().zip(leaves.chunks(2)) {
            let z = tape.add_bias(&tape.matmul(&h, &pair[0])?, &pair[1])?;
            h = match l.activation {
                Activation::Identity => z,
                Activation::Tanh => tape.tanh(&z)?,
                Activation::Relu => tape.relu(&z)?,
            };
        }
        Ok(h)
    }

    /// Bind and apply in one go. Under [`Tape::no_graph`] nothing is recorded.
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Encoded<T>> {
        let leaves = self.bind(tape);
        let output = self.apply(tape, &leaves, x)?;
        Ok(Encoded { output, leaves })
    }
}

/// Encode `inputs` and return the embedding values. `taped = false` runs in
/// a graph-less scope.
pub fn encode<T: Scalar>(params: &EncoderParams<T>, inputs: &Tensor<T>, taped: bool) -> Result<Tensor<T>> {
    let tape = Tape::new();
    if taped {
        params.forward(&tape, inputs).map(|e| e.output.detach())
    } else {
        tape.no_graph(|| params.forward(&tape, inputs)).map(|e| e.output)
    }
}

/// Seeded MLP with `dims = [in, h1, …, out]`. Hidden layers use
/// `activation`, the last layer is linear. Weights are
/// `U(−1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_params<T: Scalar>(seed: u64, dims: &[usize], activation: Activation) -> Result<EncoderParams<T>> {
    let (&input_dim, _) = dims
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("encoder dims must not be empty".into()))?;
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!("zero-width layer in {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.len() - 1;
    let layers = memtrace::in_category(Category::Parameters, || {
        dims.windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                Dense {
                    weight: Tensor::raw(vec![w[0], w[1]], data),
                    bias: Tensor::zeros(&[w[1]]),
                    activation: if k + 1 == n { Activation::Identity } else { activation },
                }
            })
            .collect()
    });
    EncoderParams::new(input_dim, layers)
}

/// The two towers. `target == None` ties `g` to `f`.
#[derive(Debug, Clone)]
pub struct DualEncoder<T> {
    pub anchor: EncoderParams<T>,
    pub target: Option<EncoderParams<T>>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn new(anchor: EncoderParams<T>, target: EncoderParams<T>) -> Result<Self> {
        if anchor.out_dim() != target.out_dim() {
            return Err(Error::shape(
                "dual_encoder",
                format!("embedding widths {} and {}", anchor.out_dim(), target.out_dim()),
            ));
        }
        Ok(DualEncoder { anchor, target: Some(target) })
    }

    pub fn tied(encoder: EncoderParams<T>) -> Self {
        DualEncoder { anchor: encoder, target: None }
    }

    /// Separate towers with the same architecture and distinct seeds.
    pub fn init(seed: u64, anchor_dims: &[usize], target_dims: &[usize], activation: Activation) -> Result<Self> {
        Self::new(
            init_params(seed, anchor_dims, activation)?,
            init_params(seed.wrapping_add(0x9e37_79b9), target_dims, activation)?,
        )
    }

    pub fn is_tied(&self) -> bool {
        self.target.is_none()
    }

    pub fn target_encoder(&self) -> &EncoderParams<T> {
        self.target.as_ref().unwrap_or(&self.anchor)
    }

    pub fn out_dim(&self) -> usize {
        self.anchor.out_dim()
    }

    /// Index of the target tower's first tensor in [`DualEncoder::params`].
    pub fn target_offset(&self) -> usize {
        if self.is_tied() {
            0
        } else {
            self.anchor.num_tensors()
        }
    }

    pub fn num_tensors(&self) -> usize {
        self.anchor.num_tensors() + self.target.as_ref().map_or(0, EncoderParams::num_tensors)
    }

    pub fn params(&self) -> Vec<Tensor<T>> {
        let mut p = self.anchor.params();
        if let Some(t) = &self.target {
            p.extend(t.params());
        }
        p
    }

    pub fn with_params(&self, mut params: Vec<Tensor<T>>) -> Result<Self> {
        if params.len() != self.num_tensors() {
            return Err(Error::shape("dual_encoder", "parameter count changed"));
        }
        let rest = params.split_off(self.anchor.num_tensors());
        let anchor = self.anchor.with_params(params)?;
        let target = match &self.target {
            Some(t) => Some(t.with_params(rest)?),
            None => None,
        };
        Ok(DualEncoder { anchor, target })
    }
}
