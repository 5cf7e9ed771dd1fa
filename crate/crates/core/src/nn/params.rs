//! Named parameter tensors and matching gradient buffers.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Zeros,
    /// He-normal with the given fan-in.
    He(usize),
    #[cfg(test)]
    Constant(f32),
}

/// An ordered collection of parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub(crate) fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, seed: u64) -> ParamId {
        let id = self.params.len();
        let len = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; len],
            #[cfg(test)]
            Init::Constant(v) => vec![v; len],
            Init::He(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                let mut rng = rng_from_seed(derive_seed(seed, stream::INIT, id as u64));
                (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.params[id.0].data
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn data_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.params[index].data
    }

    /// Replaces all values from `loaded`, which must match names and shapes exactly.
    pub fn assign(&mut self, loaded: Vec<Param>) -> Result<()> {
        if loaded.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                loaded.len(),
                self.params.len()
            )));
        }
        for (have, new) in self.params.iter().zip(&loaded) {
            if have.name != new.name || have.shape != new.shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                    new.name, new.shape, have.name, have.shape
                )));
            }
        }
        self.params = loaded;
        Ok(())
    }
}

/// Gradient buffers shaped like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) values: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            values: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for v in self.values.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn flatten(&self) -> Vec<f32> {
        self.values.iter().flatten().copied().collect()
    }
}
