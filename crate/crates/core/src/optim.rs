//! Bias-corrected ADAM over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Starts a new step; call once before the `delta` calls of that step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Update to add to coordinate `i` for gradient `g` in the current step.
    pub fn delta(&mut self, i: usize, g: f64, lr: f64) -> f64 {
        let t = self.t.max(1) as i32;
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
        let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
        let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
        -lr * m_hat / (v_hat.sqrt() + self.eps)
    }

    /// Full step over every coordinate.
    pub fn step(&mut self, values: &mut [f64], grads: &[f64], lr: f64) {
        self.tick();
        for (i, (v, g)) in values.iter_mut().zip(grads).enumerate() {
            *v += self.delta(i, *g, lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut a = Adam::new(2, 0.9, 0.999);
        let mut x = vec![1.0, 1.0];
        a.step(&mut x, &[3.0, -0.5], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-6);
        assert!((x[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut a = Adam::new(3, 0.9, 0.999);
        let mut x = vec![0.2, 0.4, 0.6];
        a.step(&mut x, &[0.0; 3], 0.5);
        assert_eq!(x, vec![0.2, 0.4, 0.6]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut a = Adam::new(1, 0.9, 0.999);
        let mut x = vec![5.0];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.5)];
            a.step(&mut x, &g, 0.05);
        }
        assert!((x[0] - 1.5).abs() < 1e-3);
    }
}
