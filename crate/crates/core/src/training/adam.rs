//! Bias-corrected Adam over named parameters.

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::scalar::Scalar;
use std::collections::BTreeMap;

pub struct Adam<F: Scalar> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every `(path, grad)` pair. Parameters without a grad
    /// entry (frozen or untouched) are left bit-identical.
    pub fn step(
        &mut self,
        params: &mut ParameterSet<F>,
        grads: &BTreeMap<String, Vec<F>>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let b1 = F::of_f64(self.beta1);
        let b2 = F::of_f64(self.beta2);
        let one = F::one();
        let eps = F::of_f64(self.eps);
        let bc1 = F::of_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = F::of_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = F::of_f64(lr);

        for (path, grad) in grads {
            let current = params.get(path)?.data.clone();
            if current.len() != grad.len() {
                return Err(Error::Dimension(format!(
                    "adam: grad for {path} has {} elements, parameter has {}",
                    grad.len(),
                    current.len()
                )));
            }
            let m = self
                .m
                .entry(path.clone())
                .or_insert_with(|| vec![F::zero(); grad.len()]);
            let v = self
                .v
                .entry(path.clone())
                .or_insert_with(|| vec![F::zero(); grad.len()]);
            let mut updated = current;
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (one - b1) * grad[i];
                v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                updated[i] = updated[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            params.set_data(path, updated)?;
        }
        Ok(())
    }
}
