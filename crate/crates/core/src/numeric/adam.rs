use crate::numeric::matrix::Matrix;
use crate::numeric::param::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are aligned with the
/// [`ParamSet`] the optimizer was created for.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = |p: &crate::numeric::param::Param| Matrix::zeros(p.value.rows(), p.value.cols());
        Adam {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.steps += 1;
        let t = self.steps;
        for (idx, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let m = self.first[idx].as_mut_slice();
            let v = self.second[idx].as_mut_slice();
            let grad = p.grad.as_slice();
            for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
                *w = adam_update(*w, grad[k], &mut m[k], &mut v[k], lr, self.config, t);
            }
        }
    }
}

/// Single-coordinate Adam update at 1-based step `t`; returns the new value.
pub fn adam_update(value: f64, grad: f64, m: &mut f64, v: &mut f64, lr: f64, cfg: AdamConfig, t: u64) -> f64 {
    debug_assert!(t >= 1);
    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * grad;
    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * grad * grad;
    let m_hat = *m / (1.0 - cfg.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - cfg.beta2.powi(t as i32));
    value - lr * m_hat / (v_hat.sqrt() + cfg.eps)
}
