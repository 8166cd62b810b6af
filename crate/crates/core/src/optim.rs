//! Adam with bias correction, plus the warmup/linear-decay learning-rate
//! schedule.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum OptimError {
    /// A gradient contained NaN/Inf; carries the parameter's path.
    NonFiniteGradient { param: String },
    /// Parameter list does not match the optimizer state.
    StateMismatch { expected: usize, got: usize },
}

impl fmt::Display for OptimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimError::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter {param}")
            }
            OptimError::StateMismatch { expected, got } => {
                write!(f, "optimizer holds {expected} slots but got {got} parameters")
            }
        }
    }
}

impl core::error::Error for OptimError {}

/// Serializable optimizer state (first/second moments per parameter).
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub step: u64,
    pub moments: Vec<(String, Vec<S>, Vec<S>)>,
}

pub struct Adam<S: Scalar> {
    beta1: S,
    beta2: S,
    eps: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &[(String, Tensor<S>)]) -> Self {
        Adam {
            beta1: S::from_f64(ADAM_BETA1),
            beta2: S::from_f64(ADAM_BETA2),
            eps: S::from_f64(ADAM_EPS),
            step: 0,
            m: params.iter().map(|(_, p)| vec![S::ZERO; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![S::ZERO; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter's accumulated gradient. A missing
    /// gradient counts as zero. Aborts (without touching any parameter) if a
    /// gradient is non-finite, naming the parameter.
    pub fn step(
        &mut self,
        params: &[(String, Tensor<S>)],
        lr: f64,
    ) -> Result<(), OptimError> {
        if params.len() != self.m.len() {
            return Err(OptimError::StateMismatch {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        let grads: Vec<Vec<S>> = params
            .iter()
            .map(|(name, p)| {
                let g = p.grad().unwrap_or_else(|| vec![S::ZERO; p.numel()]);
                if g.iter().any(|v| !v.is_finite()) {
                    Err(OptimError::NonFiniteGradient {
                        param: name.clone(),
                    })
                } else {
                    Ok(g)
                }
            })
            .collect::<Result<_, _>>()?;

        self.step += 1;
        let t = self.step as i32;
        let bias1 = S::ONE - pow_int(self.beta1, t);
        let bias2 = S::ONE - pow_int(self.beta2, t);
        let lr_s = S::from_f64(lr);

        for ((g, (_, p)), (m, v)) in grads
            .iter()
            .zip(params)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let mut update = vec![S::ZERO; g.len()];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (S::ONE - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::ONE - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                update[i] = m_hat / (v_hat.sqrt() + self.eps);
            }
            p.apply_update(&update, lr_s);
        }
        Ok(())
    }

    pub fn snapshot(&self, params: &[(String, Tensor<S>)]) -> AdamState<S> {
        AdamState {
            step: self.step,
            moments: params
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .map(|((name, _), (m, v))| (name.clone(), m.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn restore(&mut self, state: &AdamState<S>) -> Result<(), OptimError> {
        if state.moments.len() != self.m.len() {
            return Err(OptimError::StateMismatch {
                expected: self.m.len(),
                got: state.moments.len(),
            });
        }
        self.step = state.step;
        for (i, (_, m, v)) in state.moments.iter().enumerate() {
            self.m[i] = m.clone();
            self.v[i] = v.clone();
        }
        Ok(())
    }
}

fn pow_int<S: Scalar>(base: S, exp: i32) -> S {
    let mut acc = S::ONE;
    for _ in 0..exp {
        acc *= base;
    }
    acc
}

/// Learning rate at `step`: linear ramp 0 → `base_lr` over the first
/// `warmup_fraction · total_steps` steps, then linear decay to 0 at
/// `total_steps`. With zero warmup steps the schedule starts at `base_lr`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = libm::floor(warmup_fraction * total_steps as f64) as u64;
    if warmup > 0 && step <= warmup {
        base_lr * step as f64 / warmup as f64
    } else if warmup == 0 && step == 0 {
        base_lr
    } else {
        base_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}
