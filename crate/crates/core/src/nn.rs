//! Small parameterized building blocks shared by the model components.

use std::fmt;
use std::str::FromStr;

use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation `{other}` (expected relu|gelu)")),
        }
    }
}

/// Xavier-uniform `[fan_in, fan_out]` matrix.
pub fn xavier<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(rng.uniform_range(-limit, limit)))
}

/// `x W + b` over the trailing axis.
#[derive(Debug, Clone, Copy)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Affine {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.linear(x, w)?;
        g.add_broadcast(y, b)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]))?,
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, T::lit(LAYER_NORM_EPS))?;
        let gain = g.param(store, self.gain)?;
        let shift = g.param(store, self.shift)?;
        let y = g.mul_broadcast(n, gain)?;
        g.add_broadcast(y, shift)
    }
}

/// Two affine maps with an activation between them.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub first: Affine,
    pub second: Affine,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
    ) -> Result<Self> {
        let (input, hidden, output) = dims;
        Ok(Self {
            first: Affine::new(store, rng, &format!("{name}.0"), input, hidden)?,
            second: Affine::new(store, rng, &format!("{name}.1"), hidden, output)?,
            activation,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = self.activation.apply(g, h)?;
        self.second.forward(g, store, h)
    }
}
