use std::ops::Index;

use rand::Rng;

use super::{Gradients, Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `±sqrt(6 / fan_in)` (ReLU layers).
    KaimingUniform { fan_in: usize },
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))` (Tanh/sigmoid/softmax layers).
    XavierUniform { fan_in: usize, fan_out: usize },
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Constant(v) => v,
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in as f64).sqrt();
                rng.random_range(-b..b)
            }
            Init::XavierUniform { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
                rng.random_range(-b..b)
            }
        }
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(init.sample(rng))).collect();
        let t = Tensor::new(shape, data).expect("parameter shape");
        self.add_tensor(name, t)
    }

    pub fn add_tensor(&mut self, name: &str, mut t: Tensor<T>) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        t.requires_grad = true;
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Number of scalars in blocks whose name starts with `prefix`.
    pub fn n_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Copies leaf gradients into each tensor's `grad` buffer; parameters
    /// unreachable from the loss get a zero gradient.
    pub fn absorb(&mut self, grads: &Gradients<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            t.grad = Some(match grads.get(v) {
                Some(g) => g.data().to_vec(),
                None => vec![T::zero(); t.numel()],
            });
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Overwrites the values of a named block, keeping its shape.
    pub fn load_block(&mut self, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter block {name}")))?;
        let t = &mut self.tensors[id.0];
        if t.shape() != shape {
            return Err(Error::dim("load_block", t.shape(), shape));
        }
        for (dst, &src) in t.data_mut().iter_mut().zip(data) {
            *dst = T::lit(src as f64);
        }
        Ok(())
    }
}

/// Graph variables of a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Fully connected layer `y = x·Wᵀ + b` backed by two blocks of a
/// [`ParamSet`] named `<prefix>.weight` and `<prefix>.bias`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        params: &mut ParamSet<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(&format!("{prefix}.weight"), &[out_dim, in_dim], init, rng);
        let bias = params.add(&format!("{prefix}.bias"), &[out_dim], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: Var) -> Result<Var> {
        g.linear(x, bound[self.weight], bound[self.bias])
    }
}
