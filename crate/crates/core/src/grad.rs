use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Gradient keyed by parameter name.
///
/// The algebra treats the vector as the concatenation of all entries in key
/// order. Inner products accumulate in `f64` left to right over that
/// concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector<S = f64> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for GradientVector<S> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> GradientVector<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero gradient with the same names and shapes as `params`.
    pub fn zeros_like(params: &BTreeMap<String, Tensor<S>>) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn from_entries(entries: BTreeMap<String, Tensor<S>>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<S>) {
        self.entries.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn into_entries(self) -> BTreeMap<String, Tensor<S>> {
        self.entries
    }

    /// Total number of scalar coordinates.
    pub fn dim(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "gradient key sets differ ({} vs {} entries)",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(Error::Contract(format!(
                    "gradient key sets differ at {ka:?} / {kb:?}"
                )));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Contract(format!(
                    "gradient {ka:?} has shapes {:?} and {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_compatible(other)?;
        let mut acc = 0.0f64;
        for (a, b) in self.entries.values().zip(other.entries.values()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                acc += x.as_f64() * y.as_f64();
            }
        }
        Ok(acc)
    }

    pub fn norm_sq(&self) -> f64 {
        let mut acc = 0.0f64;
        for t in self.entries.values() {
            for &x in t.data() {
                acc += x.as_f64() * x.as_f64();
            }
        }
        acc
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&mut self, factor: S) {
        for t in self.entries.values_mut() {
            for x in t.data_mut() {
                *x *= factor;
            }
        }
    }

    pub fn scaled(&self, factor: S) -> Self {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(S::one(), other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(-S::one(), other)?;
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|v| *v == S::zero()))
    }

    /// Rescales in place so the norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if max_norm > 0.0 && norm > max_norm {
            self.scale(S::of(max_norm / norm));
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gv(values: &[(&str, Vec<f64>)]) -> GradientVector {
        let mut g = GradientVector::new();
        for (name, v) in values {
            g.insert(*name, Tensor::new(vec![v.len()], v.clone()).unwrap());
        }
        g
    }

    #[test]
    fn key_mismatch_is_contract_error() {
        let a = gv(&[("a", vec![1.0])]);
        let b = gv(&[("b", vec![1.0])]);
        assert!(matches!(a.dot(&b), Err(Error::Contract(_))));
        let c = gv(&[("a", vec![1.0, 2.0])]);
        assert!(matches!(a.sub(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = gv(&[("a", vec![3.0]), ("b", vec![4.0])]);
        let before = g.clip_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.norm() - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn algebra_laws(xs in prop::collection::vec(-10.0f64..10.0, 1..20),
                        ys in prop::collection::vec(-10.0f64..10.0, 1..20)) {
            let n = xs.len().min(ys.len());
            let g = gv(&[("w", xs[..n].to_vec())]);
            let h = gv(&[("w", ys[..n].to_vec())]);
            prop_assert!(g.dot(&g).unwrap() >= 0.0);
            prop_assert_eq!(g.dot(&h).unwrap(), h.dot(&g).unwrap());
            prop_assert!(g.scaled(0.0).is_zero());
            let d = g.sub(&g).unwrap();
            prop_assert!(d.is_zero());
        }
    }
}
