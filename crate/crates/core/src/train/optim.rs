use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from each parameter's `grad` and clears it.
    /// Every parameter must carry a gradient of its own size.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                Some(g) if g.len() == self.m[i].len() => {}
                Some(g) => {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {i}: gradient has {} values, expected {}",
                        g.len(),
                        self.m[i].len()
                    )))
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "parameter {i} has no gradient"
                    )))
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            for (((w, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut())
                .zip(&g)
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Halves the learning rate after `patience` consecutive epochs without a
/// strict improvement of the monitored value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64) -> Self {
        PlateauScheduler {
            lr,
            patience: 10,
            factor: 0.5,
            best: None,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's validation value and returns the lr to use next.
    pub fn step(&mut self, value: f64) -> f64 {
        let improved = match self.best {
            None => !value.is_nan(),
            Some(b) => value < b,
        };
        if improved {
            self.best = Some(value);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
