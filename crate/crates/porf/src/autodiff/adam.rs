//! Adam optimizer with bias correction over the flat parameter array.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    /// Diagnostics: total non-finite gradient entries zeroed so far.
    pub nonfinite_grads: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            nonfinite_grads: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Update one index range with its own learning rate, using the *next*
    /// step number for bias correction. Call [`AdamState::advance`] once all
    /// ranges of the step are done. Non-finite gradient entries are treated
    /// as zero and tallied.
    pub fn step_range(
        &mut self,
        params: &mut [f64],
        grads: &mut [f64],
        range: std::ops::Range<usize>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "adam length mismatch: params {}, grads {}, state {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let t = self.step + 1;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in range {
            let mut g = grads[i];
            if !g.is_finite() {
                g = 0.0;
                grads[i] = 0.0;
                self.nonfinite_grads += 1;
            }
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
        Ok(())
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    /// One optimizer step over the full parameter vector.
    pub fn step_full(&mut self, params: &mut [f64], grads: &mut [f64], lr: f64) -> Result<()> {
        self.step_range(params, grads, 0..self.m.len(), lr)?;
        self.advance();
        Ok(())
    }
}
