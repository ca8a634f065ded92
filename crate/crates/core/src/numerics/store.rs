use indexmap::IndexMap;

use super::{DenseArray, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: DenseArray<F>,
    pub grad: DenseArray<F>,
    pub trainable: bool,
    /// Whether decoupled weight decay applies (false for biases and norm gains).
    pub decay: bool,
}

/// Named parameters in insertion order, each with a gradient buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<F> {
    entries: IndexMap<String, Param<F>>,
}

/// Gradients keyed by parameter name, as produced by a backward pass.
pub type Gradients<F> = IndexMap<String, Vec<F>>;

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: DenseArray<F>,
        trainable: bool,
        decay: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::config(format!("parameter {name:?} already exists")));
        }
        let grad = DenseArray::zeros(value.shape());
        self.entries.insert(
            name,
            Param {
                value,
                grad,
                trainable,
                decay,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("no parameter named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&DenseArray<F>> {
        Ok(&self.get(name)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<F>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(F::ZERO);
        }
    }

    /// Adds `grads` into the trainable entries; frozen entries are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if !p.trainable {
                continue;
            }
            if g.len() != p.grad.len() {
                return Err(Error::shape(format!(
                    "gradient for {name:?} has {} values, parameter has {}",
                    g.len(),
                    p.grad.len()
                )));
            }
            for (dst, &src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst += src;
            }
        }
        Ok(())
    }

    /// L2 norm over the gradients of trainable entries, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (name, p) in &self.entries {
            p.value.ensure_finite(name)?;
            p.grad.ensure_finite(&format!("grad of {name}"))?;
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParameterStore<G> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                            trainable: p.trainable,
                            decay: p.decay,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the factor applied (1 when no clipping happened).
pub fn clip_global_norm<F: Real>(store: &mut ParameterStore<F>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = F::from_f64(scale);
    for p in store.entries.values_mut().filter(|p| p.trainable) {
        for g in p.grad.data_mut() {
            *g *= s;
        }
    }
    scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(g: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("w", DenseArray::zeros(&[g.len()]), true, true).unwrap();
        s.get_mut("w").unwrap().grad.data_mut().copy_from_slice(g);
        s
    }

    #[test]
    fn clip_cases() {
        let mut s = store_with_grad(&[0.0, 2.0]);
        assert_eq!(clip_global_norm(&mut s, 1.0), 0.5);
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 1.0]);

        let mut s = store_with_grad(&[0.3, 0.4]);
        assert_eq!(clip_global_norm(&mut s, 1.0), 1.0);
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.3, 0.4]);

        let mut s = store_with_grad(&[0.0, 0.0]);
        assert_eq!(clip_global_norm(&mut s, 1.0), 1.0);
        assert!(s.get("w").unwrap().grad.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn frozen_entries_ignore_gradients() {
        let mut s = ParameterStore::<f64>::new();
        s.insert("a", DenseArray::zeros(&[2]), true, true).unwrap();
        s.insert("b", DenseArray::zeros(&[2]), false, true).unwrap();
        let mut g = Gradients::new();
        g.insert("a".into(), vec![1.0, 2.0]);
        g.insert("b".into(), vec![3.0, 4.0]);
        s.accumulate(&g).unwrap();
        assert_eq!(s.get("a").unwrap().grad.data(), &[1.0, 2.0]);
        assert_eq!(s.get("b").unwrap().grad.data(), &[0.0, 0.0]);
        assert_eq!(s.trainable_count(), 2);
        assert_eq!(s.total_count(), 4);
        assert!(s.insert("a", DenseArray::zeros(&[1]), true, true).is_err());
    }
}
