//! Named parameter storage.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Name and shape of one stored parameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Parameters in registration order. The order is the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            specs: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.specs.push(ParamSpec {
            name,
            shape: value.shape.clone(),
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Registers every parameter on `graph`. Differentiable when `trainable`.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            specs: self.specs.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// Appends every value as little-endian `f32`.
    pub fn write_f32_le(&self, out: &mut Vec<u8>) {
        for t in &self.values {
            for v in &t.data {
                out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
    }

    /// Overwrites values from little-endian `f32`, returning the bytes consumed.
    pub fn read_f32_le(&mut self, bytes: &[u8]) -> Result<usize> {
        let needed = self.numel() * 4;
        if bytes.len() < needed {
            return Err(Error::Integrity(format!(
                "weight payload holds {} bytes, parameters need {needed}",
                bytes.len()
            )));
        }
        let mut chunks = bytes.chunks_exact(4);
        for t in &mut self.values {
            for v in &mut t.data {
                let c = chunks.next().expect("length checked");
                *v = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        Ok(needed)
    }

    /// Checks that `specs` describes exactly this store.
    pub fn check_manifest(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs != self.specs.as_slice() {
            let first = self
                .specs
                .iter()
                .zip(specs)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("expected {} parameters, found {}", self.specs.len(), specs.len()));
            return Err(Error::Format(format!("parameter manifest mismatch: {first}")));
        }
        Ok(())
    }
}

/// Graph handles of a bound [`ParamStore`].
pub struct Bound<'g, T> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> Bound<'g, T> {
    pub fn get(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn f32_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ParamStore::<f32>::new();
        a.add_uniform("w", &[3, 4], 4, &mut rng);
        a.add_zeros("b", &[3]);
        let mut bytes = Vec::new();
        a.write_f32_le(&mut bytes);
        assert_eq!(bytes.len(), 15 * 4);
        let mut b = a.clone();
        for t in b.values_mut() {
            t.data.fill(9.0);
        }
        assert_eq!(b.read_f32_le(&bytes).unwrap(), 60);
        assert_eq!(a, b);
        assert!(b.read_f32_le(&bytes[..10]).is_err());
    }

    #[test]
    fn uniform_init_is_bounded_and_seeded() {
        let make = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamStore::<f64>::new();
            p.add_uniform("w", &[16, 9], 9, &mut rng);
            p
        };
        let a = make(1);
        assert!(a.values()[0].data.iter().all(|v| v.abs() <= 1.0 / 3.0));
        assert_eq!(a, make(1));
        assert_ne!(a, make(2));
    }

    #[test]
    fn manifest_mismatch_is_reported() {
        let mut p = ParamStore::<f32>::new();
        p.add_zeros("a", &[2]);
        let mut specs = p.specs().to_vec();
        assert!(p.check_manifest(&specs).is_ok());
        specs[0].shape = vec![3];
        assert!(matches!(p.check_manifest(&specs), Err(Error::Format(_))));
    }
}
