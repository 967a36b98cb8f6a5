//! Named parameter storage and the handles layers use to reach it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Storage rank of a parameter as written to checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRank {
    /// A vector (biases, scalars, coefficient lists), stored `(1, len, 1, 1)`.
    Vector,
    /// A convolution kernel.
    Kernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub rank: ParamRank,
    pub value: Tensor<T>,
}

/// Ordered, uniquely-named parameter collection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, rank: ParamRank, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::BadConfig(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, rank, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| Error::BadConfig(format!("unknown parameter {name}")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name} is {}, got {}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|p| (p.name.as_str(), &mut p.value))
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param { name: p.name.clone(), rank: p.rank, value: p.value.cast() })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every parameter on `tape` in store order.
    pub fn bind<'t>(&self, tape: &'t mut Tape<T>) -> Result<Graph<'t, T>> {
        self.bind_with(tape, &[])
    }

    /// As [`ParamStore::bind`], but the named parameters are taken from
    /// existing tape variables instead of the store.
    pub fn bind_with<'t>(&self, tape: &'t mut Tape<T>, overrides: &[(&str, Var)]) -> Result<Graph<'t, T>> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            match overrides.iter().find(|(n, _)| *n == p.name) {
                Some(&(_, v)) => {
                    if tape.shape(v) != p.value.shape() {
                        return Err(Error::ShapeMismatch(format!("override for {} has the wrong shape", p.name)));
                    }
                    vars.push(v)
                }
                None => vars.push(tape.param(p.name.clone(), p.value.clone())?),
            }
        }
        Ok(Graph { tape, vars })
    }
}

/// A tape with every parameter of a store bound to a variable.
pub struct Graph<'t, T: Scalar> {
    pub tape: &'t mut Tape<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Graph<'_, T> {
    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// `gain·√(3/fan_in)` with `gain = √(2/(1+a²))`, `a = √5`.
pub fn kaiming_bound(fan_in: f64) -> f64 {
    let a2: f64 = 5.0;
    (2.0 / (1.0 + a2)).sqrt() * (3.0 / fan_in).sqrt()
}

/// Seeded initializer used while building layers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Kaiming-uniform over fan-in `c·kh·kw` with negative slope `√5`:
    /// `U(−1/√fan_in, 1/√fan_in)`.
    pub fn kaiming<T: Scalar>(&mut self, shape: Shape) -> Tensor<T> {
        let fan_in = (shape.c * shape.h * shape.w).max(1) as f64;
        let bound = kaiming_bound(fan_in);
        Tensor::from_fn(shape, |_, _, _, _| T::lit(self.rng.gen_range(-bound..bound)))
    }
}

/// Adds parameters to a store under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub init: &'a mut Init,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, init: &'a mut Init) -> Self {
        Builder { store, init, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Builder<'_, T>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        let mut child = Builder { store: &mut *self.store, init: &mut *self.init, prefix };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn kernel(&mut self, name: &str, shape: Shape) -> Result<ParamId> {
        let value = self.init.kaiming(shape);
        self.store.insert(self.full_name(name), ParamRank::Kernel, value)
    }

    pub fn zeros_kernel(&mut self, name: &str, shape: Shape) -> Result<ParamId> {
        self.store.insert(self.full_name(name), ParamRank::Kernel, Tensor::zeros(shape))
    }

    pub fn vector(&mut self, name: &str, values: &[f64]) -> Result<ParamId> {
        let t = Tensor::vector(&values.iter().map(|&v| T::lit(v)).collect::<Vec<_>>());
        self.store.insert(self.full_name(name), ParamRank::Vector, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_ordered() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(0);
        let mut b = Builder::new(&mut store, &mut init);
        b.scope("a", |b| b.vector("bias", &[0.0, 1.0])).unwrap();
        b.scope("a", |b| b.scope("c", |b| b.kernel("weight", Shape::new(2, 1, 3, 3)))).unwrap();
        assert!(b.scope("a", |b| b.vector("bias", &[0.0])).is_err());
        assert_eq!(store.names().collect::<Vec<_>>(), ["a.bias", "a.c.weight"]);
        assert_eq!(store.count(), 2 + 18);
    }

    #[test]
    fn kaiming_bounds_and_determinism() {
        let s = Shape::new(8, 4, 3, 3);
        let a: Tensor<f32> = Init::new(5).kaiming(s);
        let b: Tensor<f32> = Init::new(5).kaiming(s);
        assert!(a.bit_eq(&b));
        let bound = (1.0f32 / 36.0).sqrt() + 1e-6;
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
