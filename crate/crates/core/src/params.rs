//! Named parameter declarations and their values.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Box-Muller standard normal draw. Computed with `libm`, so a seed gives the same
/// value whichever float backend the build links.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Index of a parameter within a [`ParamLayout`] / [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at ±2σ.
    TruncNormal { std: f64 },
    Normal { std: f64 },
    /// Normal with `std = gain / sqrt(fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
}

impl Init {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Init::Zeros => 0.0,
            Init::Ones => 1.0,
            Init::Normal { std } => {
                let z = standard_normal(rng);
                std * z
            }
            Init::Kaiming { fan_in, gain } => {
                let z = standard_normal(rng);
                gain / libm::sqrt(fan_in.max(1) as f64) * z
            }
            Init::TruncNormal { std } => loop {
                let z = standard_normal(rng);
                if z.abs() <= 2.0 {
                    break std * z;
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

/// Ordered list of parameter declarations; the order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.into(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    /// Learnable scalars whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(ParamSpec::numel)
            .sum()
    }

    /// Draws initial values in declaration order.
    pub fn initialize<S: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<S> {
        let tensors = self
            .specs
            .iter()
            .map(|s| Tensor::from_fn(s.shape.clone(), |_| S::from_f64(s.init.sample(rng))))
            .collect();
        ParamStore { tensors }
    }

    pub fn zeros<S: Scalar>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self.specs.iter().map(|s| Tensor::zeros(s.shape.clone())).collect(),
        }
    }
}

/// Parameter values in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn from_tensors(tensors: Vec<Tensor<S>>) -> Self {
        Self { tensors }
    }

    /// Checks that every tensor matches its declaration's shape.
    pub fn conforms_to(&self, layout: &ParamLayout) -> bool {
        self.tensors.len() == layout.len()
            && self
                .tensors
                .iter()
                .zip(layout.specs())
                .all(|(t, s)| t.shape() == s.shape.as_slice())
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor<S>> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }
}
