//! Adam over the detector's flattened parameters.

use crate::detector::{DetectorModel, Gradients};

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, parameter_count: usize) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut DetectorModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        for (conv, g) in model.convs_mut().into_iter().zip(&grads.convs) {
            for (p, gv) in conv
                .weight
                .iter_mut()
                .chain(conv.bias.iter_mut())
                .zip(g.weight.iter().chain(&g.bias))
            {
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * gv;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * gv * gv;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                i += 1;
            }
        }
    }
}
