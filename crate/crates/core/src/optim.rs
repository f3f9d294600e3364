//! First-order update rules shared by image synthesis and classifier training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    GradientDescent {
        step: f32,
    },
    Adam {
        step: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
    },
}

impl OptimizerKind {
    pub fn adam(step: f32) -> Self {
        OptimizerKind::Adam {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_size(&self) -> f32 {
        match *self {
            OptimizerKind::GradientDescent { step } | OptimizerKind::Adam { step, .. } => step,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step = self.step_size();
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {step}")));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidConfig("adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

/// Optimizer state over any number of parameter slots. Call [`Optimizer::tick`]
/// once per step, then [`Optimizer::update`] for each slot.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    t: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        match self.kind {
            OptimizerKind::GradientDescent { step } => {
                params.iter_mut().zip(grads).for_each(|(p, &g)| *p -= step * g);
            }
            OptimizerKind::Adam {
                step,
                beta1,
                beta2,
                eps,
            } => {
                if self.moments.len() <= slot {
                    self.moments.resize(slot + 1, (Vec::new(), Vec::new()));
                }
                let (m, v) = &mut self.moments[slot];
                if m.len() != params.len() {
                    *m = vec![0.0; params.len()];
                    *v = vec![0.0; params.len()];
                }
                let t = self.t.max(1);
                let c1 = (1.0 - (beta1 as f64).powi(t)) as f32;
                let c2 = (1.0 - (beta2 as f64).powi(t)) as f32;
                for i in 0..params.len() {
                    let g = grads[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    params[i] -= step * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
}
