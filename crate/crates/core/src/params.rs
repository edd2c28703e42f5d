//! Named parameter storage and the small layer descriptors built on it.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Fill, Graph, Scalar, Tensor, Var};

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers feeding a relu.
    HeNormal { fan_in: usize },
    /// `N(0, 1 / fan_in)`, for layers with a linear or sigmoid output.
    LecunNormal { fan_in: usize },
    Zeros,
}

/// Weight initializer family of a layer; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightInit {
    #[default]
    He,
    Lecun,
    Zero,
}

impl WeightInit {
    fn for_fan_in(self, fan_in: usize) -> Init {
        match self {
            WeightInit::He => Init::HeNormal { fan_in },
            WeightInit::Lecun => Init::LecunNormal { fan_in },
            WeightInit::Zero => Init::Zeros,
        }
    }
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map from dotted parameter names to tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: IndexMap<String, Tensor<T>>,
}

/// Graph handles for every parameter of a [`ModelParams`], by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn param_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

impl<T: Scalar> ModelParams<T> {
    pub fn empty() -> Self {
        ModelParams {
            tensors: IndexMap::new(),
        }
    }

    /// Seeded initialization. Parameter `i` draws from its own stream, so a
    /// layout change only perturbs the parameters it touches.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut params = Self::empty();
        for (i, spec) in specs.iter().enumerate() {
            let fill = match spec.init {
                Init::Zeros => Fill::Zeros,
                Init::LecunNormal { fan_in } => Fill::Normal {
                    std: (1.0 / fan_in as f64).sqrt(),
                    seed: param_seed(seed, i),
                },
                Init::HeNormal { fan_in } => Fill::HeNormal {
                    fan_in,
                    seed: param_seed(seed, i),
                },
            };
            params.insert(&spec.name, Tensor::create(&spec.shape, fill)?)?;
        }
        Ok(params)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.tensors.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Overwrites every value with `v`; useful for switching parts of a
    /// network off in tests.
    pub fn fill_prefix(&mut self, prefix: &str, v: f64) {
        let t = T::from_f64_lossy(v);
        for (name, tensor) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                tensor.data_mut().iter_mut().for_each(|x| *x = t);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone().with_requires_grad(true))))
            .collect();
        Bound { vars }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Moves gradients accumulated in `g` into each tensor's `grad` slot,
    /// adding to anything already stored there.
    pub fn collect_grads(&mut self, g: &mut Graph<T>, bound: &Bound) {
        for (name, var) in bound.iter() {
            let Some(tensor) = self.tensors.get_mut(name) else { continue };
            if let Some(grad) = g.take_grad(var) {
                match &mut tensor.grad {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &v)| *a += v),
                    None => tensor.grad = Some(grad),
                }
            }
        }
    }

    /// Checks names and shapes against a layout, in either direction.
    pub fn check_layout(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self
                .tensors
                .get(&spec.name)
                .ok_or_else(|| Error::MissingParameter(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|k| !specs.iter().any(|s| &s.name == *k))
        {
            return Err(Error::UnknownParameter(extra.clone()));
        }
        Ok(())
    }
}

/// A biased square convolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub spec: ConvSpec,
    pub init: WeightInit,
}

impl ConvLayer {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> Self {
        ConvLayer {
            name: name.into(),
            cin,
            cout,
            k,
            spec,
            init: WeightInit::He,
        }
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    /// Stride-1 convolution that preserves spatial extent.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(name, cin, cout, k, ConvSpec::same(k))
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cin_g = self.cin / self.spec.groups;
        vec![
            ParamSpec {
                name: self.weight_name(),
                shape: vec![self.cout, cin_g, self.k, self.k],
                init: self.init.for_fan_in(cin_g * self.k * self.k),
            },
            ParamSpec {
                name: self.bias_name(),
                shape: vec![self.cout],
                init: Init::Zeros,
            },
        ]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        g.conv2d(x, w, Some(b), self.spec)
    }
}

/// A biased dense layer on `[N, D]` inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearLayer {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub init: WeightInit,
}

impl LinearLayer {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        LinearLayer {
            name: name.into(),
            din,
            dout,
            init: WeightInit::He,
        }
    }

    pub fn with_init(mut self, init: WeightInit) -> Self {
        self.init = init;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.weight_name(),
                shape: vec![self.dout, self.din],
                init: self.init.for_fan_in(self.din),
            },
            ParamSpec {
                name: self.bias_name(),
                shape: vec![self.dout],
                init: Init::Zeros,
            },
        ]
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let b = p.get(&self.bias_name())?;
        g.linear(x, w, Some(b))
    }
}

pub(crate) fn count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}
