//! Adaptive-moment optimizer over arbitrary parameter blocks.

use crate::error::{Error, Result};

use super::mlp::MlpParams;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn with_lr(lr: S) -> Self {
        AdamConfig {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
        }
    }
}

/// First/second moment accumulators mirroring the parameter blocks, plus a
/// strictly increasing step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub cfg: AdamConfig<S>,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(cfg: AdamConfig<S>, block_sizes: &[usize]) -> Self {
        AdamState {
            cfg,
            m: block_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: block_sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn for_params(cfg: AdamConfig<S>, params: &MlpParams<S>) -> Self {
        let sizes: Vec<usize> = params.blocks().iter().map(|b| b.len()).collect();
        Self::new(cfg, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over matching parameter/gradient blocks. Rejects non-finite
    /// gradients before touching any state.
    pub fn step_blocks(&mut self, params: &mut [&mut [S]], grads: &[&[S]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} blocks", self.m.len()),
                format!("{} param / {} grad blocks", params.len(), grads.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(Error::shape(
                    format!("block {i} of {}", self.m[i].len()),
                    format!("{}", g.len()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "adam_step gradient block {i} (step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = S::one() - c.beta1.powi(t);
        let bc2 = S::one() - c.beta2.powi(t);
        for ((block, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = c.beta1 * m[i] + (S::one() - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (S::one() - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                block[i] = block[i] - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Adaptive-moment update of a full network.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState<S>,
    params: &mut MlpParams<S>,
    grads: &MlpParams<S>,
) -> Result<()> {
    let grad_blocks = grads.blocks();
    let mut param_blocks = params.blocks_mut();
    state.step_blocks(&mut param_blocks, &grad_blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coremath::mlp::{Activation, MlpSpec};
    use crate::coremath::rng::SeededRng;

    fn toy_params(seed: u64) -> MlpParams<f64> {
        let spec = MlpSpec::uniform(vec![2, 3, 1], Activation::Relu).unwrap();
        let mut rng = SeededRng::new(seed);
        MlpParams::init(&spec, &mut rng)
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut params = toy_params(1);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::for_params(AdamConfig::with_lr(0.1), &params);
        adam_step(&mut state, &mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 1);
    }

    // With a constant gradient the bias-corrected moments converge to g and
    // g^2, so the per-coordinate step magnitude approaches lr.
    #[test]
    fn constant_gradient_step_magnitude_approaches_lr() {
        let mut params = toy_params(2);
        let mut grads = params.zeros_like();
        for block in grads.blocks_mut() {
            for g in block {
                *g = 0.37;
            }
        }
        let lr = 1e-3;
        let mut state = AdamState::for_params(AdamConfig::with_lr(lr), &params);
        let mut prev = params.clone();
        for _ in 0..500 {
            prev = params.clone();
            adam_step(&mut state, &mut params, &grads).unwrap();
        }
        for (now, before) in params.blocks().iter().zip(prev.blocks().iter()) {
            for (a, b) in now.iter().zip(before.iter()) {
                let step = (a - b).abs();
                assert!((step - lr).abs() < lr * 0.01, "step {step}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut params = toy_params(3);
        let mut grads = params.zeros_like();
        grads.weights[0].data_mut()[0] = f64::NAN;
        let mut state = AdamState::for_params(AdamConfig::with_lr(0.1), &params);
        let before = params.clone();
        let err = adam_step(&mut state, &mut params, &grads);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(params, before);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn equal_seeds_give_bit_identical_trajectories() {
        let run = || {
            let mut params = toy_params(9);
            let mut state = AdamState::for_params(AdamConfig::with_lr(0.01), &params);
            let mut rng = SeededRng::new(123);
            for _ in 0..50 {
                let mut grads = params.zeros_like();
                for block in grads.blocks_mut() {
                    for g in block {
                        *g = rng.normal();
                    }
                }
                adam_step(&mut state, &mut params, &grads).unwrap();
            }
            params
        };
        let a = run();
        let b = run();
        for (x, y) in a.blocks().iter().zip(b.blocks().iter()) {
            for (p, q) in x.iter().zip(y.iter()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }
}
