use std::collections::HashMap;

use super::param::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step_count: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every non-frozen parameter and clears all
    /// gradients. A non-frozen parameter without a gradient is an error.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter `{}` has no gradient at optimizer step",
                p.name
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - f64::from(self.beta1).powi(t);
        let bc2 = 1.0 - f64::from(self.beta2).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);

        for p in params.iter_mut() {
            let grad = p.grad.take();
            if p.frozen {
                continue;
            }
            let grad = grad.expect("checked above");
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::dim(
                    "adam_step",
                    format!("moment buffer for `{}` has {} entries, gradient {}", p.name, m.len(), grad.len()),
                ));
            }
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = f64::from(*m) / bc1;
                let v_hat = f64::from(*v) / bc2;
                *w -= (f64::from(self.lr) * m_hat / (v_hat.sqrt() + f64::from(self.eps))) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_store(value: f32, grad: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value)).unwrap();
        s.get_mut("p").unwrap().grad = Some(vec![grad]);
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected m_hat = 1, v_hat = 1.
        let mut s = scalar_store(1.0, 1.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut s).unwrap();
        let p = s.get("p").unwrap();
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!(p.grad.is_none());
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut s = scalar_store(0.25, 0.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut s).unwrap();
        assert!((s.get("p").unwrap().value.data()[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut s = scalar_store(0.3, 5.0);
        s.get_mut("p").unwrap().frozen = true;
        s.get_mut("p").unwrap().grad = Some(vec![5.0]);
        let before = s.get("p").unwrap().value.data()[0].to_bits();
        let mut adam = AdamState::new(0.1);
        adam.step(&mut s).unwrap();
        assert_eq!(s.get("p").unwrap().value.data()[0].to_bits(), before);
    }

    #[test]
    fn missing_gradient_is_contract_violation() {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(1.0)).unwrap();
        let err = AdamState::new(0.1).step(&mut s).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn second_step_follows_recurrence() {
        // Hand-computed in f64: after grads 1.0 then 0.5 with lr 0.01.
        let mut s = scalar_store(0.0, 1.0);
        let mut adam = AdamState::new(0.01);
        adam.step(&mut s).unwrap();
        s.get_mut("p").unwrap().grad = Some(vec![0.5]);
        adam.step(&mut s).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * 0.5;
        let v: f64 = 0.999 * 0.001 + 0.001 * 0.25;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.998001);
        let expected = -0.01 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((f64::from(s.get("p").unwrap().value.data()[0]) - expected).abs() < 1e-6);
    }
}
