use super::model::{ParamGroup, ProbeParams};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: ProbeParams,
    second: ProbeParams,
}

impl Adam {
    pub fn new(params: &ProbeParams, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ProbeParams, grads: &ProbeParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for g in ParamGroup::ALL {
            let theta = params.group_mut(g);
            let grad = grads.group(g);
            let m = self.first.group_mut(g);
            let v = self.second.group_mut(g);
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
