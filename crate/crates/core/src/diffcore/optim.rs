//! Named trainable parameters with paired gradient buffers, the Adam
//! optimizer and the cosine learning-rate schedule.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::array::NdArray;
use crate::error::{invalid, CoreError, Result};
use crate::fmath;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
}

/// Ordered collection of named parameters. Registration order is stable
/// and defines checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: NdArray) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(invalid("param_store", format!("duplicate parameter '{name}'")));
        }
        let grad = NdArray::zeros(value.shape());
        self.entries.push(ParamEntry { name, value, grad });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &NdArray {
        &self.entries[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &NdArray) {
        let entry = &mut self.entries[id.0];
        debug_assert_eq!(entry.grad.shape(), g.shape());
        for (d, &s) in entry.grad.data_mut().iter_mut().zip(g.data()) {
            *d += s;
        }
    }

    pub fn zero_grads(&mut self) {
        for entry in &mut self.entries {
            entry.grad.data_mut().fill(0.0);
        }
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Adam state: per-parameter first/second moment estimates plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.entries().iter().map(|e| NdArray::zeros(e.value.shape())).collect(),
            v: store.entries().iter().map(|e| NdArray::zeros(e.value.shape())).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every parameter; gradients are
    /// zeroed afterwards. NaN gradients abort with the parameter name.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if lr < 0.0 {
            return Err(invalid("adam_step", format!("negative learning rate {lr}")));
        }
        for (id, entry) in store.entries.iter().enumerate() {
            if entry.grad.data().iter().any(|g| g.is_nan()) {
                return Err(CoreError::NanGradient {
                    param: entry.name.to_string(),
                });
            }
            let _ = id;
        }
        self.step += 1;
        let bc1 = 1.0 - fmath::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - fmath::powi(self.beta2, self.step as i32);
        for (idx, entry) in store.entries.iter_mut().enumerate() {
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            let grads = entry.grad.data_mut();
            for ((pv, &g), (mm, vv)) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(grads.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mm = self.beta1 * *mm + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let m_hat = *mm / bc1;
                let v_hat = *vv / bc2;
                let update = lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
                if update != 0.0 {
                    *pv -= update;
                }
            }
            grads.fill(0.0);
        }
        Ok(())
    }
}

/// Cosine annealing from lr0 at epoch 0 down to 0 at the final epoch.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(invalid(
            "cosine_lr",
            format!("epoch {epoch} out of range for {total_epochs} total"),
        ));
    }
    if total_epochs == 1 {
        return Ok(lr0);
    }
    let frac = epoch as f64 / (total_epochs - 1) as f64;
    Ok(0.5 * lr0 * (1.0 + fmath::cos(PI * frac)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut store = ParamStore::new();
        let p = store
            .register("w", NdArray::from_vec(vec![2], vec![1.5, -2.5]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-3).unwrap();
        assert_eq!(store.value(p).data(), &[1.5, -2.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Constant gradient g: after one step the delta is
        // -lr·ĝ/(√v̂+ε) with m̂ = g and v̂ = g², i.e. ≈ -lr·sign(g).
        let g = 0.37;
        let lr = 1e-2;
        let mut store = ParamStore::new();
        let p = store.register("w", NdArray::scalar(2.0)).unwrap();
        store.accumulate_grad(p, &NdArray::scalar(g));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, lr).unwrap();
        let expected = 2.0 - lr * g / (g.abs() + 1e-8);
        assert!((store.value(p).data()[0] - expected).abs() < 1e-15);
        assert!((store.value(p).data()[0] - (2.0 - lr)).abs() < 1e-8);
    }

    #[test]
    fn frozen_parameter_untouched() {
        let mut store = ParamStore::new();
        let live = store.register("live", NdArray::scalar(1.0)).unwrap();
        let frozen = store.register("frozen", NdArray::scalar(5.0)).unwrap();
        store.accumulate_grad(live, &NdArray::scalar(1.0));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-2).unwrap();
        assert_ne!(store.value(live).data()[0], 1.0);
        assert_eq!(store.value(frozen).data()[0], 5.0);
    }

    #[test]
    fn lr_zero_is_bit_identical() {
        let mut store = ParamStore::new();
        let p = store
            .register("w", NdArray::from_vec(vec![3], vec![0.1, -0.0, 3.25]).unwrap())
            .unwrap();
        store.accumulate_grad(p, &NdArray::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let before: Vec<u64> = store.value(p).data().iter().map(|x| x.to_bits()).collect();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.0).unwrap();
        let after: Vec<u64> = store.value(p).data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut store = ParamStore::new();
        let p = store.register("bad_param", NdArray::scalar(1.0)).unwrap();
        store.accumulate_grad(p, &NdArray::scalar(f64::NAN));
        let mut adam = Adam::new(&store);
        match adam.step(&mut store, 1e-3).unwrap_err() {
            CoreError::NanGradient { param } => assert_eq!(param, "bad_param"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let lr0 = 5e-4;
        assert_eq!(cosine_lr(0, 100, lr0).unwrap(), lr0);
        assert!(cosine_lr(99, 100, lr0).unwrap().abs() < 1e-19);
        // Odd total: midpoint is exactly half.
        let mid = cosine_lr(50, 101, lr0).unwrap();
        assert!((mid - lr0 / 2.0).abs() < 1e-18);
        assert!(cosine_lr(100, 100, lr0).is_err());
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParamStore::new();
        store.register("w", NdArray::scalar(0.0)).unwrap();
        assert!(store.register("w", NdArray::scalar(1.0)).is_err());
    }
}
