//! Trainable parameters, their gradient accumulators and optimizer moments.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which freeze unit a parameter belongs to.
///
/// The embedding layer, the encoder blocks and the teacher head form the
/// backbone; each student head is its own unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    Block(usize),
    Teacher,
    Student(usize),
}

impl ParamGroup {
    pub fn is_backbone(self) -> bool {
        !matches!(self, ParamGroup::Student(_))
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    /// Decoupled weight decay applies to this tensor (matrices and
    /// embeddings; not biases or layernorm affine terms).
    pub decay: bool,
    pub(crate) first_moment: Tensor<T>,
    pub(crate) second_moment: Tensor<T>,
    pub(crate) steps: u64,
}

impl<T: Scalar> Parameter<T> {
    fn new(name: String, group: ParamGroup, value: Tensor<T>, decay: bool) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name,
            group,
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
            trainable: true,
            decay,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Ordered collection of parameters. Registration order is the order of
/// random initialization and of checkpoint serialization.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>, decay: bool) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name.into(), group, value, decay));
        id
    }

    /// Adds a parameter drawn from N(0, std²).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("positive std");
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| T::of(normal.sample(rng))).collect();
        let value = Tensor::from_vec(shape.to_vec(), data).expect("shape matches numel");
        self.add(name, group, value, true)
    }

    pub fn add_filled(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], fill: f64) -> ParamId {
        self.add(name, group, Tensor::full(shape, T::of(fill)), false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Marks parameters trainable according to `pred` on their group.
    pub fn set_trainable(&mut self, pred: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p.group);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Order-sensitive FNV-1a digest of the raw bits of every value whose
    /// group satisfies `pred`. Used to assert bit-identity across stages.
    pub fn fingerprint(&self, pred: impl Fn(ParamGroup) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().filter(|p| pred(p.group)) {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.value.data() {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}
