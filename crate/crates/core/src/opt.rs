//! Adam-style optimizer with adaptive moments and bias correction. Used both
//! for velocity-network training and for the seed optimization in the
//! solvers.

/// Hyperparameters. `learning_rate` is the only knob callers usually touch.
#[derive(Debug, Clone, Copy)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamSettings {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamSettings { learning_rate, ..Default::default() }
    }
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state over a fixed list of parameter groups.
pub struct Adam {
    settings: AdamSettings,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(settings: AdamSettings, group_sizes: &[usize]) -> Self {
        Adam {
            settings,
            step: 0,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over all groups. `params[i]` and `grads[i]` must match the
    /// group sizes given at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "wrong number of parameter groups");
        assert_eq!(grads.len(), self.m.len(), "wrong number of gradient groups");
        self.step += 1;
        let s = &self.settings;
        let bc1 = 1.0 - s.beta1.powi(self.step as i32);
        let bc2 = 1.0 - s.beta2.powi(self.step as i32);
        for gi in 0..params.len() {
            let (p, g) = (&mut *params[gi], grads[gi]);
            assert_eq!(p.len(), g.len(), "group {gi}: parameter/gradient length mismatch");
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
                v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= s.learning_rate * m_hat / (v_hat.sqrt() + s.epsilon);
            }
        }
    }
}
