use std::collections::BTreeMap;

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are keyed by the position of the set
/// in the slice passed to [`AdamState::step`] and the parameter name, so the
/// same sets must be passed in the same order every step.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            ..Default::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, set: usize, name: &str) -> Option<&[f64]> {
        self.first.get(&key(set, name)).map(Vec::as_slice)
    }

    pub fn second_moment(&self, set: usize, name: &str) -> Option<&[f64]> {
        self.second.get(&key(set, name)).map(Vec::as_slice)
    }

    /// Applies one update to every parameter in `sets` and clears their
    /// gradients. Every parameter must carry a finite gradient.
    pub fn step(&mut self, sets: &mut [&mut ParamSet]) -> Result<()> {
        for (si, set) in sets.iter().enumerate() {
            for (name, p) in set.iter() {
                if self.first.get(&key(si, name)).is_some_and(|m| m.len() != p.numel()) {
                    return Err(Error::invalid(format!("adam_step: `{name}` changed size")));
                }
                let g = p.grad().ok_or_else(|| Error::MissingGrad(name.to_string()))?;
                if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("adam_step gradient of `{name}`"),
                        index,
                    });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (si, set) in sets.iter_mut().enumerate() {
            for (name, p) in set.iter_mut() {
                let n = p.numel();
                let m = self.first.entry(key(si, name)).or_insert_with(|| vec![0.0; n]);
                let v = self.second.entry(key(si, name)).or_insert_with(|| vec![0.0; n]);
                let g = p.grad().expect("checked above").to_vec();
                for (((x, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *x -= lr * mhat / (vhat.sqrt() + eps);
                }
                p.zero_grad();
            }
        }
        Ok(())
    }
}

fn key(set: usize, name: &str) -> String {
    format!("{set}/{name}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64, grad: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::scalar(value)).unwrap();
        ps.get_mut("p").unwrap().accumulate_grad(&[grad]).unwrap();
        ps
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = single(1.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut ps]).unwrap();
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((ps.get("p").unwrap().item() - want).abs() < 1e-15);
        assert_eq!(adam.step_count(), 1);
        assert!(ps.get("p").unwrap().grad().is_none());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = single(0.25, 0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut ps]).unwrap();
        assert_eq!(ps.get("p").unwrap().item(), 0.25);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let mut ps = ParamSet::new();
        for name in ["a", "b"] {
            ps.insert(name, Tensor::from_vec(vec![0.5, -0.5]).unwrap()).unwrap();
            ps.get_mut(name).unwrap().accumulate_grad(&[0.3, -2.0]).unwrap();
        }
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut [&mut ps]).unwrap();
            for name in ["a", "b"] {
                ps.get_mut(name).unwrap().accumulate_grad(&[0.3, -2.0]).unwrap();
            }
        }
        assert_eq!(ps.get("a").unwrap().data(), ps.get("b").unwrap().data());
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut ps = ParamSet::new();
        ps.insert("h.fc1.weight", Tensor::scalar(1.0)).unwrap();
        let err = AdamState::new(AdamConfig::default()).step(&mut [&mut ps]).unwrap_err();
        assert!(err.to_string().contains("h.fc1.weight"), "{err}");
    }

    #[test]
    fn equal_names_in_different_sets_keep_separate_moments() {
        let mut a = single(1.0, 1.0);
        let mut b = single(1.0, -3.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut a, &mut b]).unwrap();
        assert!((adam.first_moment(0, "p").unwrap()[0] - 0.1).abs() < 1e-15);
        assert!((adam.first_moment(1, "p").unwrap()[0] + 0.3).abs() < 1e-15);
    }
}
