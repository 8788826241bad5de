//! Adam optimizer over a fixed, ordered parameter list.

use super::Tensor;
use crate::error::{Error, Result};

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f32) -> Adam {
        Adam::with_betas(params, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &[Tensor], lr: f32, beta1: f32, beta2: f32, eps: f32) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.v
    }

    /// One bias-corrected Adam update. Parameters without an accumulated
    /// gradient are treated as having a zero gradient (moments still decay).
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} params, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            if self.m[i].len() != p.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i} has {} elements, state has {}", p.numel(), self.m[i].len()),
                ));
            }
            let grad = p.grad();
            let mut data = p.inner.data.borrow_mut();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                let g = grad.as_ref().map(|g| g[j]).unwrap_or(0.0);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[Tensor]) {
        for p in params {
            p.zero_grad();
        }
    }
}
