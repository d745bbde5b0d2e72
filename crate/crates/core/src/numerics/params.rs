use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named, trainable tensor together with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub grad: Tensor<T>,
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std), truncated at two standard deviations.
    Normal(f64),
}

/// Owns every parameter of one model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

// FNV-1a, so that a parameter's init stream depends only on (seed, name).
fn name_stream(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Initialization draws from a ChaCha stream keyed
    /// by the name, so adding or removing other parameters never shifts it.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let tensor = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, T::one()),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(name_stream(name));
                let normal = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                while data.len() < n {
                    let v: f64 = normal.sample(&mut rng);
                    if v.abs() <= 2.0 * std {
                        data.push(T::lit(v));
                    }
                }
                Tensor::new(shape.to_vec(), data)?
            }
        };
        self.insert(name, tensor)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.shape());
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "parameter `{}` is {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                tensor.shape()
            )));
        }
        p.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn convert<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.convert(),
                    grad: p.grad.convert(),
                })
                .collect(),
            index: self.index.clone(),
            seed: self.seed,
        }
    }
}
