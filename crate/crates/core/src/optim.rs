use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::GradientVector;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Move against the gradient (minimize).
    Descend,
    /// Move along the gradient (maximize).
    Ascend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        }
    }
}

/// Adam with bias correction. Moments are created lazily per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<S = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: BTreeMap<String, Vec<S>>,
    v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return Err(Error::Config("Adam needs 0 ≤ β < 1 and ε > 0".into()));
        }
        Ok(Self {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `params` from `grad`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grad: &GradientVector<S>,
        direction: Direction,
    ) -> Result<()> {
        check_keys(params, grad)?;
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let step = S::of(direction.sign() * self.lr / c1);
        let inv_c2 = S::of(1.0 / c2);
        let eps = S::of(self.eps);
        for (name, g) in grad.iter() {
            let p = params.get_mut(name).expect("keys checked");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *x += step * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient step `θ ± lr·g`.
pub fn sgd_step<S: Scalar>(
    params: &mut BTreeMap<String, Tensor<S>>,
    grad: &GradientVector<S>,
    lr: f64,
    direction: Direction,
) -> Result<()> {
    check_keys(params, grad)?;
    let step = S::of(direction.sign() * lr);
    for (name, g) in grad.iter() {
        let p = params.get_mut(name).expect("keys checked");
        for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *x += step * gi;
        }
    }
    Ok(())
}

fn check_keys<S: Scalar>(
    params: &BTreeMap<String, Tensor<S>>,
    grad: &GradientVector<S>,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            params.len()
        )));
    }
    for (name, g) in grad.iter() {
        match params.get(name) {
            Some(p) if p.shape() == g.shape() => {}
            _ => {
                return Err(Error::Contract(format!(
                    "gradient entry {name} does not match a parameter"
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = one("w", 1.0);
        let g = GradientVector::from_entries(one("w", 0.3));
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8).unwrap();
        adam.step(&mut p, &g, Direction::Descend).unwrap();
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-6);
        adam.step(&mut p, &g, Direction::Ascend).unwrap();
        assert!((p["w"].data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = one("w", 3.0);
        let mut adam = Adam::new(0.05, 0.9, 0.999, 1e-8).unwrap();
        for _ in 0..500 {
            let g = GradientVector::from_entries(one("w", 2.0 * p["w"].data()[0]));
            adam.step(&mut p, &g, Direction::Descend).unwrap();
        }
        assert!(p["w"].data()[0].abs() < 1e-2);
    }

    #[test]
    fn mismatched_keys_rejected() {
        let mut p = one("w", 1.0);
        let g = GradientVector::from_entries(one("u", 1.0));
        assert!(sgd_step(&mut p, &g, 0.1, Direction::Descend).is_err());
        assert!(Adam::<f64>::new(0.0, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn sgd_signs() {
        let mut p = one("w", 1.0);
        let g = GradientVector::from_entries(one("w", 2.0));
        sgd_step(&mut p, &g, 0.25, Direction::Ascend).unwrap();
        assert_eq!(p["w"].data()[0], 1.5);
    }
}
