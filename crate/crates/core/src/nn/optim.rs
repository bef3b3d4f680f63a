use serde::{Deserialize, Serialize};

use super::layers::{Param, ParamVisitor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers are matched to
/// parameters by visiting order, which is fixed for a given model.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` and clears their gradients.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        self.step_visit(|f| {
            for p in params.iter_mut() {
                f("", p);
            }
        });
    }

    /// Like [`Adam::step`], with parameters supplied by a visitor such as
    /// [`super::HasParams::visit_params`].
    pub fn step_visit(&mut self, visit: impl FnOnce(&mut ParamVisitor<'_>)) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        visit(&mut |_, p: &mut Param| {
            if ms.len() == i {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[i], &mut vs[i]);
            let Param { value, grad } = p;
            for (j, (w, &g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
            p.zero_grad();
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut p = Param::new(Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        p.grad = Tensor::from_vec(&[3], vec![0.3, 0.1, -4.0]).unwrap();
        let before = p.value.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..AdamConfig::default() });
        adam.step(&mut [&mut p]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::new(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        p.grad = Tensor::from_vec(&[2], vec![3.0, -0.01]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p]);
        assert!((p.value.data()[0] + 1e-4).abs() < 1e-9);
        assert!((p.value.data()[1] - 1e-4).abs() < 1e-8);
    }
}
