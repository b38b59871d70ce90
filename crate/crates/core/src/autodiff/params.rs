use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named, shaped parameter tensors with per-tensor Adam moment estimates.
/// Iteration order is the name order, which keeps updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let m = Tensor::zeros(value.shape.clone());
        let v = Tensor::zeros(value.shape.clone());
        let prev = self
            .slots
            .insert(name.to_string(), Slot { value, m, v, step: 0 });
        assert!(prev.is_none(), "duplicate parameter name `{name}`");
    }

    /// Replace a tensor's value, resetting its optimizer state.
    pub fn replace(&mut self, name: &str, value: Tensor) {
        self.slots.remove(name);
        self.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Copy every tensor whose name starts with `src_prefix` to the same name
    /// under `dst_prefix`, replacing existing entries. Used to snapshot the
    /// motor decoder before fine-tuning.
    pub fn snapshot_prefix(&mut self, src_prefix: &str, dst_prefix: &str) {
        let copies: Vec<(String, Tensor)> = self
            .slots
            .iter()
            .filter(|(n, _)| n.starts_with(src_prefix))
            .map(|(n, s)| {
                (format!("{dst_prefix}{}", &n[src_prefix.len()..]), s.value.clone())
            })
            .collect();
        for (name, value) in copies {
            self.slots.remove(&name);
            self.insert(&name, value);
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.slots.keys().any(|n| n.starts_with(prefix))
    }

    /// Mutable access for tests and the finite-difference harness.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }
}

/// One Adam update with bias correction over the gradients present in
/// `grads`. Parameters not named in `grads` are left untouched, including
/// their moment estimates. The whole update is rejected if any gradient is
/// non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !store.contains(name) {
            return Err(Error::UnknownParam(name.clone()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let slot = store.slots.get(name).unwrap();
        if g.shape != slot.value.shape {
            return Err(Error::ShapeMismatch {
                context: format!("gradient of `{name}`"),
                expected: slot.value.shape.clone(),
                got: g.shape.clone(),
            });
        }
    }
    for (name, g) in grads {
        let slot = store.slots.get_mut(name).unwrap();
        slot.step += 1;
        let t = slot.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..g.data.len() {
            let gi = g.data[i];
            slot.m.data[i] = cfg.beta1 * slot.m.data[i] + (1.0 - cfg.beta1) * gi;
            slot.v.data[i] = cfg.beta2 * slot.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = slot.m.data[i] / bc1;
            let v_hat = slot.v.data[i] / bc2;
            slot.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scalar_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::scalar(1.0));
        adam_step(&mut store, &grads, AdamConfig::with_lr(0.1)).unwrap();
        // bias-corrected m_hat / (sqrt(v_hat) + eps) == 1 / (1 + 1e-8)
        let p = store.get("p").unwrap().item();
        assert!((p - 0.9).abs() < 1e-8, "p = {p}");
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(vec![1.0, -2.0]));
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::vector(vec![0.0, 0.0]));
        for _ in 0..5 {
            adam_step(&mut store, &grads, AdamConfig::with_lr(0.1)).unwrap();
        }
        assert_eq!(store.get("p").unwrap().data, vec![1.0, -2.0]);
        assert_eq!(store.slots["p"].step, 5);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_update() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        grads.insert("b".to_string(), Tensor::scalar(f64::NAN));
        let err = adam_step(&mut store, &grads, AdamConfig::with_lr(0.1)).unwrap_err();
        assert!(err.to_string().contains("b"), "{err}");
        // nothing was applied, not even to `a`
        assert_eq!(store.get("a").unwrap().item(), 1.0);
        assert_eq!(store.slots["a"].step, 0);
    }

    #[test]
    fn determinism_bit_identical_runs() {
        let run = || {
            let mut store = ParamStore::new();
            store.insert("p", Tensor::vector(vec![0.3, -0.7, 1.1]));
            for k in 0..50 {
                let g: Vec<f64> = store
                    .get("p")
                    .unwrap()
                    .data
                    .iter()
                    .map(|v| v * 0.5 + k as f64 * 0.01)
                    .collect();
                let mut grads = BTreeMap::new();
                grads.insert("p".to_string(), Tensor::vector(g));
                adam_step(&mut store, &grads, AdamConfig::with_lr(3e-3)).unwrap();
            }
            store.get("p").unwrap().data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
