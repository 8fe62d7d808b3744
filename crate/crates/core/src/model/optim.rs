//! Adaptive-moment (Adam) optimizer over a model's parameter list.

use super::unet::VoxelClassifier;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>, // (m, v) per parameter tensor, visit order
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update step from the gradients currently accumulated in `model`.
    pub fn step(&mut self, model: &mut VoxelClassifier) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);

        let mut idx = 0usize;
        let moments = &mut self.moments;
        model.for_each_param_mut(|_, param, grad| {
            if moments.len() <= idx {
                moments.push((vec![0.0; param.len()], vec![0.0; param.len()]));
            }
            let (m, v) = &mut moments[idx];
            debug_assert_eq!(m.len(), param.len());
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                param[i] -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
