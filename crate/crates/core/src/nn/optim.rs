use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f32) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Optimizer state: step counter plus first/second moment buffers per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    lr_scale: Vec<f32>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f32) {
        if self.lr_scale.len() <= id.index() {
            self.lr_scale.resize(id.index() + 1, 1.0);
        }
        self.lr_scale[id.index()] = scale;
    }

    pub fn lr_scale(&self, id: ParamId) -> f32 {
        self.lr_scale.get(id.index()).copied().unwrap_or(1.0)
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[f32], &[f32])> {
        let m = self.first_moment.get(id.index())?;
        let v = self.second_moment.get(id.index())?;
        (!m.is_empty()).then(|| (m.as_slice(), v.as_slice()))
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient (missing gradients count as zero). Frozen
/// parameters are never touched.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for &id in &ids {
        if let Some(g) = store.get(id).grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
    }
    let n = store.len();
    state.first_moment.resize_with(n, Vec::new);
    state.second_moment.resize_with(n, Vec::new);
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for id in ids {
        let lr = lr * state.lr_scale(id);
        let tensor = store.get_mut(id);
        let len = tensor.len();
        let m = &mut state.first_moment[id.index()];
        let v = &mut state.second_moment[id.index()];
        if m.len() != len {
            *m = vec![0.0; len];
            *v = vec![0.0; len];
        }
        let grad = tensor.grad().map(<[f32]>::to_vec);
        let data = tensor.data_mut();
        for i in 0..len {
            let gi = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store_with(values: &[f32], grads: &[f32]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .zip(grads)
            .enumerate()
            .map(|(i, (&v, &g))| {
                let id = s.insert(format!("p{i}"), Tensor::scalar(v).with_requires_grad(true)).unwrap();
                s.get_mut(id).accumulate_grad(&[g], 1.0).unwrap();
                id
            })
            .collect();
        (s, ids)
    }

    #[test]
    fn lr_scale_applies_per_parameter() {
        let (mut s, ids) = store_with(&[0.0, 0.0], &[1.0, 1.0]);
        let mut st = AdamState::new(AdamConfig::default());
        st.set_lr_scale(ids[1], 0.1);
        adam_step(&mut s, &mut st).unwrap();
        let (a, b) = (s.get(ids[0]).data()[0], s.get(ids[1]).data()[0]);
        assert!((b / a - 0.1).abs() < 1e-6);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, ids) = store_with(&[0.0], &[1.0]);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        // m_hat = v_hat = 1, update = lr * 1 / (1 + eps)
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((s.get(ids[0]).item() - expect).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let (mut s, ids) = store_with(&[0.3, -1.5], &[0.0, 0.0]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..50 {
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.get(ids[0]).item(), 0.3);
        assert_eq!(s.get(ids[1]).item(), -1.5);
    }

    #[test]
    fn identical_params_get_identical_updates() {
        let (mut s, ids) = store_with(&[0.7, 0.7], &[0.25, 0.25]);
        let mut st = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.get(ids[0]).item().to_bits(), s.get(ids[1]).item().to_bits());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut s, _) = store_with(&[0.0], &[f32::NAN]);
        let mut st = AdamState::new(AdamConfig::default());
        assert!(matches!(adam_step(&mut s, &mut st), Err(Error::NonFinite { .. })));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut s, ids) = store_with(&[2.0], &[1.0]);
        s.set_trainable(ids[0], false);
        let mut st = AdamState::new(AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get(ids[0]).item(), 2.0);
    }
}
