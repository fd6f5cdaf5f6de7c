//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let m: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected AdamW update of `params` with `grads` (store order).
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adamw",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adamw" });
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * weight_decay * *pv;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vals));
        s
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store(vec![1.0, -2.0, 0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &s);
        st.step(&mut s, &[Tensor::vector(vec![3.0, -0.2, 1e-3])]).unwrap();
        let got = s.get(s.ids().next().unwrap()).data().to_vec();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-8, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut s = store(vec![1.0, -2.0]);
        let before = s.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &s);
        st.step(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_grad_decay_scales() {
        let mut s = store(vec![1.0, -2.0]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &s);
        st.step(&mut s, &[Tensor::zeros(&[2])]).unwrap();
        let got = s.get(s.ids().next().unwrap()).data();
        assert!((got[0] - 0.95).abs() < 1e-15);
        assert!((got[1] + 1.9).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut s = store(vec![1.0, -2.0]);
        let mut st = OptimState::new(AdamWConfig::default(), &s);
        assert!(st.step(&mut s, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
