//! Named parameter storage shared by every network.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which sub-network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    Fusion,
    Vrg,
    Vae,
    Velocity,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Fusion, Group::Vrg, Group::Vae, Group::Velocity];

    pub fn name(self) -> &'static str {
        match self {
            Group::Fusion => "fusion",
            Group::Vrg => "vrg",
            Group::Vae => "vae",
            Group::Velocity => "velocity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Ordered collection of named tensors. Registration order is stable, so a
/// model rebuilt from the same architecture gets the same ids.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    entries: Vec<Entry<T>>,
}

/// Weight initialisers.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    He(usize),
    /// Gaussian with the given standard deviation.
    Normal(f64),
    Zeros,
    /// Identity matrix for square 2-D weights.
    Identity,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, group: Group, shape: &[usize], init: Init, rng: &mut Rng) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        let value = match init {
            Init::He(fan_in) => {
                let a = libm::sqrt(6.0 / fan_in.max(1) as f64);
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..a)))
            }
            Init::Normal(std) => Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            }),
            Init::Zeros => Tensor::zeros(shape),
            Init::Identity => {
                assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square matrix");
                let n = shape[0];
                Tensor::from_fn(shape, |i| if i / n == i % n { T::one() } else { T::zero() })
            }
        };
        self.entries.push(Entry { name: name.into(), group, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn count(&self, group: Group) -> usize {
        self.entries.iter().filter(|e| e.group == group).map(|e| e.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|e| Entry { name: e.name.clone(), group: e.group, value: e.value.map(|x| U::of(x.f64())) })
                .collect(),
        }
    }

    /// Places every parameter on `g`; groups accepted by `trainable` become
    /// gradient leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(Group) -> bool) -> Binding {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut train = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = trainable(e.group);
            vars.push(if t { g.param(e.value.clone()) } else { g.constant(e.value.clone()) });
            train.push(t);
        }
        Binding { vars, trainable: train }
    }
}

/// Graph handles for a bound [`Params`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    /// Gradient per parameter index; `None` for frozen or unreached ones.
    pub fn collect<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .iter()
            .zip(&self.trainable)
            .map(|(&v, &t)| if t { grads.take(v) } else { None })
            .collect()
    }
}
