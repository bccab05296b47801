use serde::{Deserialize, Serialize};

use super::head::{GradientSet, HeadParams};
use super::KernelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a list of flat tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, tensor_lens: &[usize]) -> Self {
        Self {
            config,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(config: AdamWConfig, params: &HeadParams) -> Self {
        let lens: Vec<usize> = params.tensors().iter().map(|s| s.len()).collect();
        Self::new(config, &lens)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tensor_lens(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// Resizes the accumulators to new tensor lengths. Tensors that grew keep
    /// their existing moments and get zeros for the appended tail, which is
    /// exactly what appending classifier rows needs.
    pub fn resize(&mut self, tensor_lens: &[usize]) {
        if tensor_lens.len() != self.m.len() {
            *self = Self::new(self.config, tensor_lens);
            return;
        }
        for ((m, v), &n) in self.m.iter_mut().zip(&mut self.v).zip(tensor_lens) {
            if m.len() != n {
                m.resize(n, 0.0);
                v.resize(n, 0.0);
            }
        }
    }

    /// One decoupled-weight-decay Adam update over parallel slice lists.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), KernelError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(KernelError::Dimension(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(KernelError::Dimension(format!(
                    "tensor {i}: optimizer length {}, parameter length {}, gradient length {}",
                    m.len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] = p[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// AdamW step over every tensor of the head.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &GradientSet,
    state: &mut AdamWState,
) -> Result<(), KernelError> {
    params.check_congruent(&grads.0, "adamw gradient")?;
    let g = grads.tensors();
    state.update(&mut params.tensors_mut(), &g)
}
