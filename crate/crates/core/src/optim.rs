//! Adam with bias correction, used for both the generator and the
//! fake-branch model.

use crate::error::{Error, Result};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.99;
pub const DEFAULT_EPS_HAT: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps_hat: DEFAULT_EPS_HAT,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam step, in place. Rejects non-finite gradient
    /// entries with diagnostics rather than poisoning the moments.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimMismatch {
                context: "adam update",
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        for (i, &g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: "adam gradient",
                    index: i,
                    value: g,
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_keeps_params() {
        let mut st = AdamState::new(3, 1e-2);
        let mut p = vec![1.0, -2.0, 0.5];
        st.update(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut st = AdamState::new(2, 1e-3);
        let mut p = vec![0.0, 0.0];
        st.update(&mut p, &[3.0, -4.0]).unwrap();
        // bias-corrected first step: update = lr·g/(|g| + eps)
        assert!((p[0].abs() - 1e-3).abs() < 1e-8);
        assert!((p[1].abs() - 1e-3).abs() < 1e-8);
        assert!(p[0] < 0.0 && p[1] > 0.0);
    }

    #[test]
    fn deterministic_updates() {
        let mut a = AdamState::new(2, 1e-2);
        let mut b = AdamState::new(2, 1e-2);
        let mut pa = vec![0.3, 0.7];
        let mut pb = vec![0.3, 0.7];
        for k in 0..10 {
            let g = [0.1 * k as f64, -0.2];
            a.update(&mut pa, &g).unwrap();
            b.update(&mut pb, &g).unwrap();
        }
        assert_eq!(pa, pb);
    }

    #[test]
    fn rejects_non_finite_grad() {
        let mut st = AdamState::new(2, 1e-2);
        let mut p = vec![0.0, 0.0];
        let err = st.update(&mut p, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        // params untouched, step not incremented
        assert_eq!(p, vec![0.0, 0.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut st = AdamState::new(2, 1e-2);
        let mut p = vec![0.0, 0.0, 0.0];
        assert!(st.update(&mut p, &[1.0, 1.0]).is_err());
    }
}
