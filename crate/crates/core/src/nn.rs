//! Parameter storage and the small layers the model is assembled from.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::autograd::{Unary, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::dim("param set", cur.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Allocates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl fmt::Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n = shape.iter().product();
        let data = self.rng.uniform_vec(n, -bound, bound);
        self.add(name, Tensor::from_parts(shape.to_vec(), data))
    }

    /// Replaces the initial value of a parameter created through this builder.
    pub fn overwrite(&mut self, id: ParamId, value: Tensor) {
        self.store.set(id, value).expect("overwrite keeps the shape");
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Var<'g> {
        x.unary(match self {
            Activation::Silu => Unary::Silu,
            Activation::Relu => Unary::Relu,
            Activation::Tanh => Unary::Tanh,
            Activation::Sigmoid => Unary::Sigmoid,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weight and bias.
    FanIn,
    Zeros,
}

/// Affine map over the trailing dimension, weight `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, inputs: usize, outputs: usize, bias: bool, init: Init) -> Self {
        let bound = match init {
            Init::FanIn => 1.0 / (inputs.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
        };
        let weight = pb.uniform("weight", &[outputs, inputs], bound);
        let bias = bias.then(|| pb.uniform("bias", &[outputs], bound));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        let w = g.param(self.weight);
        match self.bias {
            Some(b) => x.linear(&w, Some(&g.param(b))),
            None => x.linear(&w, None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, width: usize) -> Self {
        Self {
            gain: pb.constant("gain", &[width], 1.0),
            shift: pb.constant("shift", &[width], 0.0),
            eps: 1e-5,
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Result<Var<'g>> {
        let g = x.graph();
        x.layer_norm(&g.param(self.gain), &g.param(self.shift), self.eps)
    }
}

/// Stack of linear layers with an activation between consecutive layers
/// (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`. `last_init` applies to the final layer.
    pub fn new(pb: &mut ParamBuilder<'_>, widths: &[usize], activation: Activation, last_init: Init) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::FanIn };
                Linear::new(&mut pb.sub(i), widths[i], widths[i + 1], true, init)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn forward<'g>(&self, mut x: Var<'g>) -> Result<Var<'g>> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(x)?;
            if i + 1 < n {
                x = self.activation.apply(x);
            }
        }
        Ok(x)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }
}
