//! Named parameter registry shared by every layer of a model.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::ops::RunningStats;
use crate::tensor::{Element, Tensor};

/// A trainable tensor registered under a unique path such as
/// `block3.layer1.conv.weight` or `attn4.channel.w0`.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

pub type SharedStats<T> = Rc<RefCell<RunningStats<T>>>;

/// Non-trainable state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T: Element> {
    pub name: String,
    pub stats: SharedStats<T>,
}

#[derive(Debug)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashSet<String>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashSet::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Tensor<T>> {
        let name = name.into();
        self.claim(&name)?;
        if !value.requires_grad() || !value.is_leaf() {
            return Err(Error::Config(format!("{name} is not a trainable leaf tensor")));
        }
        self.params.push(Parameter {
            name,
            value: value.clone(),
        });
        Ok(value)
    }

    /// Registers a tensor drawn from U(-bound, bound) with
    /// `bound = 1/sqrt(fan_in)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)).unwrap())
            .collect();
        self.add(name, Tensor::parameter(data, shape)?)
    }

    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`, which keeps
    /// activation variance steady through relu layers.
    pub fn add_he_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<T>> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)).unwrap())
            .collect();
        self.add(name, Tensor::parameter(data, shape)?)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor<T>> {
        let len = shape.iter().product();
        let t = Tensor::parameter(vec![T::from_f64(value).unwrap(); len], shape)?;
        self.add(name, t)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, channels: usize) -> Result<SharedStats<T>> {
        let name = name.into();
        self.claim(&name)?;
        let stats = Rc::new(RefCell::new(RunningStats::new(channels)));
        self.buffers.push(Buffer {
            name,
            stats: Rc::clone(&stats),
        });
        Ok(stats)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|p| p.value.zero_grad());
    }
}
