use super::scalar::Scalar;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<T>,
}

/// Named, ordered collection of learnable arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` with `fan_in` = rows.
    FanIn,
    Normal(f64),
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: [usize; 2], values: Vec<T>) -> ParamId {
        assert_eq!(values.len(), shape[0] * shape[1]);
        self.params.push(Param {
            name: name.into(),
            shape,
            values,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 2],
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let n = shape[0] * shape[1];
        let values = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn => {
                let bound = 1.0 / (shape[0].max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).unwrap();
                (0..n).map(|_| T::lit(dist.sample(rng))).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| T::lit(dist.sample(rng))).collect()
            }
        };
        self.add(name, shape, values)
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    pub fn count_ids(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].values.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    values: p.values.iter().map(|v| U::from(*v).unwrap()).collect(),
                })
                .collect(),
        }
    }

    /// Replaces all values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::shape("copy_from", "parameter count differs"));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.shape != src.shape || dst.name != src.name {
                return Err(Error::shape(
                    "copy_from",
                    format!("{} {:?} vs {} {:?}", dst.name, dst.shape, src.name, src.shape),
                ));
            }
            dst.values.clone_from(&src.values);
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. Accumulation is additive;
/// callers zero them explicitly between optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            buffers: store
                .params
                .iter()
                .map(|p| vec![T::zero(); p.values.len()])
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.buffers[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x = *x + *y;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in &mut self.buffers {
            b.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.buffers.iter().flatten().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> T {
        self.buffers
            .iter()
            .flatten()
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }
}
