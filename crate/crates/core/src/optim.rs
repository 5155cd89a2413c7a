//! First-order optimisers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid AdamW parameters {self:?}")))
        }
    }
}

/// Adam with decoupled weight decay:
///
/// ```text
/// p <- p (1 - lr wd)
/// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
/// p <- p - lr (m / (1 - b1^k)) / (sqrt(v / (1 - b2^k)) + eps)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW {
    params: AdamWParams,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamW {
    pub fn new(params: AdamWParams, len: usize) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        })
    }

    pub fn reset(&mut self) {
        self.m.fill(0.0);
        self.v.fill(0.0);
        self.steps = 0;
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        assert_eq!(x.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let AdamWParams {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.params;
        self.steps += 1;
        let bc1 = 1.0 - beta1.powi(self.steps);
        let bc2 = 1.0 - beta2.powi(self.steps);
        for i in 0..x.len() {
            let g = grad[i];
            x[i] *= 1.0 - lr * weight_decay;
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `x <- x - lr g`
pub fn gradient_descent_step(x: &mut [f64], grad: &[f64], lr: f64) {
    assert_eq!(x.len(), grad.len(), "gradient length mismatch");
    for (xi, gi) in x.iter_mut().zip(grad) {
        *xi -= lr * gi;
    }
}
