use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape};
use crate::numerics::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::TrainingState(format!("parameter `{name}` registered twice")));
        }
        self.params.insert(name, Param { value, grad: None });
        Ok(())
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|p| p.grad.as_ref())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets every gradient buffer to zeros of the right shape.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            match &mut p.grad {
                Some(g) => g.fill(T::zero()),
                None => p.grad = Some(Tensor::zeros(p.value.shape().to_vec())),
            }
        }
    }

    /// Adds the adjoints of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for (var, name) in tape.bindings() {
            let Some(g) = grads.get(*var) else { continue };
            if let Some(p) = self.params.get_mut(name) {
                match &mut p.grad {
                    Some(acc) => acc.add_assign(g),
                    None => p.grad = Some(g.clone()),
                }
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: None,
                        },
                    )
                })
                .collect(),
        }
    }
}
