//! Named parameter registry with gradient buffers and Adam moments.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hod::{Group, HodModel};

pub type Gradients = HashMap<String, Array2<f64>>;

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    m: Array2<f64>,
    v: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    /// Registers `(name, group, value)` triples; names must be unique.
    pub fn new(entries: Vec<(String, Group, Array2<f64>)>) -> Result<Self> {
        let mut params = Vec::with_capacity(entries.len());
        let mut index = HashMap::new();
        for (name, group, value) in entries {
            if index.insert(name.clone(), params.len()).is_some() {
                return Err(Error::Tape(format!("parameter '{name}' registered twice")));
            }
            let zeros = Array2::zeros(value.raw_dim());
            params.push(Param { name, group, value, grad: zeros.clone(), m: zeros.clone(), v: zeros });
        }
        Ok(ParamStore { params, index, step: 0 })
    }

    pub fn from_model(model: &HodModel) -> Result<Self> {
        let entries = model
            .param_list()
            .into_iter()
            .map(|(name, group, shape, values)| (name, group, Array2::from_shape_vec(shape, values).expect("visited shape matches values")))
            .collect();
        Self::new(entries)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `scale * grads` to the buffers; unknown names or shapes are errors.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads {
            let i = *self.index.get(name).ok_or_else(|| Error::Tape(format!("gradient for unknown parameter '{name}'")))?;
            let p = &mut self.params[i];
            if p.grad.dim() != g.dim() {
                return Err(Error::Tape(format!("gradient shape mismatch for '{name}'")));
            }
            p.grad.scaled_add(scale, g);
        }
        Ok(())
    }

    /// Copies the stored values back into `model`.
    pub fn write_to(&self, model: &mut HodModel) {
        model.visit_params(&mut |name, _, _, values| {
            if let Some(p) = self.get(name) {
                values.copy_from_slice(p.value.as_slice().expect("parameters are contiguous"));
            }
        });
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        let moments = self
            .params
            .iter()
            .map(|p| (p.name.clone(), Moments { m: p.m.iter().copied().collect(), v: p.v.iter().copied().collect() }))
            .collect();
        OptimizerState { step: self.step, moments }
    }

    pub fn restore_optimizer_state(&mut self, state: &OptimizerState) -> Result<()> {
        for (name, mom) in &state.moments {
            let i = *self.index.get(name).ok_or_else(|| Error::Validation(format!("optimizer state for unknown parameter '{name}'")))?;
            let p = &mut self.params[i];
            let shape = p.value.dim();
            let bad = || Error::Validation(format!("optimizer state shape mismatch for '{name}'"));
            p.m = Array2::from_shape_vec(shape, mom.m.clone()).map_err(|_| bad())?;
            p.v = Array2::from_shape_vec(shape, mom.v.clone()).map_err(|_| bad())?;
        }
        self.step = state.step;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr_base: f64,
    pub lr_downstream: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_base: 1e-4, lr_downstream: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = [self.lr_base, self.lr_downstream].iter().all(|r| r.is_finite() && *r >= 0.0);
        let betas_ok = [self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b));
        if !rates_ok || !betas_ok || self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Validation(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn lr(&self, group: Group) -> f64 {
        match group {
            Group::Base => self.lr_base,
            Group::Downstream => self.lr_downstream,
        }
    }
}

/// One bias-corrected Adam update using the accumulated gradients.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let lr = cfg.lr(p.group);
        for (((x, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(p.m.iter_mut()).zip(p.v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn store(entries: &[(&str, Group, f64)]) -> ParamStore {
        ParamStore::new(entries.iter().map(|&(n, g, x)| (n.to_string(), g, array![[x]])).collect()).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store(&[("a", Group::Base, 1.5), ("b", Group::Downstream, -2.0)]);
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.get("a").unwrap().value[[0, 0]], 1.5);
        assert_eq!(s.get("b").unwrap().value[[0, 0]], -2.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(&[("w", Group::Downstream, 0.0)]);
        s.accumulate(&Gradients::from([("w".to_string(), array![[1.0]])]), 1.0).unwrap();
        let cfg = AdamConfig { lr_downstream: 0.1, ..AdamConfig::default() };
        adam_step(&mut s, &cfg);
        assert!((s.get("w").unwrap().value[[0, 0]] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn group_rates() {
        let mut s = store(&[("base", Group::Base, 0.0), ("down", Group::Downstream, 0.0)]);
        let grads = Gradients::from([("base".to_string(), array![[0.3]]), ("down".to_string(), array![[0.3]])]);
        s.accumulate(&grads, 1.0).unwrap();
        let cfg = AdamConfig { lr_base: 1e-4, lr_downstream: 1e-3, ..AdamConfig::default() };
        adam_step(&mut s, &cfg);
        let base = s.get("base").unwrap().value[[0, 0]];
        let down = s.get("down").unwrap().value[[0, 0]];
        assert!((down / base - 10.0).abs() < 1e-9);
    }

    #[test]
    fn registry_errors() {
        let dup = vec![("a".to_string(), Group::Base, array![[0.0]]), ("a".to_string(), Group::Base, array![[0.0]])];
        assert!(ParamStore::new(dup).is_err());
        let mut s = store(&[("a", Group::Base, 0.0)]);
        assert!(s.accumulate(&Gradients::from([("b".to_string(), array![[1.0]])]), 1.0).is_err());
        assert!(s.accumulate(&Gradients::from([("a".to_string(), array![[1.0, 2.0]])]), 1.0).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let mut s = store(&[("a", Group::Base, 0.5)]);
        s.accumulate(&Gradients::from([("a".to_string(), array![[2.0]])]), 1.0).unwrap();
        adam_step(&mut s, &AdamConfig::default());
        let state = s.optimizer_state();
        let mut fresh = store(&[("a", Group::Base, 0.5)]);
        fresh.restore_optimizer_state(&state).unwrap();
        assert_eq!(fresh.optimizer_state(), state);
        assert_eq!(fresh.step(), 1);
    }
}
