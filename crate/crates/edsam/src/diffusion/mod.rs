//! Conditional denoising diffusion in data space: variance schedule,
//! forward noising, noise-prediction training, ancestral sampling, and
//! deterministic sampling with inversion.

mod denoiser;
mod sampler;

pub use denoiser::{
    denoiser_loss_and_grads, load_denoiser, save_denoiser, train_denoiser, Denoiser,
    DenoiserGrads, DiffusionTrainConfig, NoisePredictionExample, COND_EMBED_DIM,
    TIME_EMBED_DIM,
};
pub use sampler::{ddim_invert, ddim_sample, ddpm_sample, SamplerConfig};

use crate::error::{Error, Result};
use crate::{Real, Tensor};

/// Constructor arguments of a [`DiffusionSchedule`], kept alongside
/// checkpoints so a schedule can be rebuilt exactly.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScheduleParams {
    pub t: usize,
    pub beta_start: Real,
    pub beta_end: Real,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.t, self.beta_start, self.beta_end)
    }
}

/// Noise-process constants. Step indices are 1-based (`1..=t_steps`) to
/// match the forward-process recursion; accessors do the offsetting.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    pub betas: Vec<Real>,
    pub alphas: Vec<Real>,
    pub alpha_bars: Vec<Real>,
}

impl DiffusionSchedule {
    pub fn beta(&self, i: usize) -> Real {
        self.betas[i - 1]
    }

    pub fn alpha(&self, i: usize) -> Real {
        self.alphas[i - 1]
    }

    pub fn alpha_bar(&self, i: usize) -> Real {
        self.alpha_bars[i - 1]
    }

    /// Cumulative signal retention with the empty-product convention
    /// `alpha_bar(0) = 1`, used by the deterministic sampler's final step.
    pub fn alpha_bar_or_one(&self, i: usize) -> Real {
        if i == 0 {
            1.0
        } else {
            self.alpha_bar(i)
        }
    }

    pub fn check_step(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.t_steps {
            return Err(Error::invalid(format!(
                "step index {i} out of range 1..={}",
                self.t_steps
            )));
        }
        Ok(())
    }
}

/// Linear variance schedule over `t` steps with cumulative products.
pub fn make_schedule(t: usize, beta_start: Real, beta_end: Real) -> Result<DiffusionSchedule> {
    if t == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<Real> = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as Real / (t - 1) as Real)
            .collect()
    };
    let alphas: Vec<Real> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t);
    let mut running = 1.0;
    for &a in &alphas {
        running *= a;
        alpha_bars.push(running);
    }
    Ok(DiffusionSchedule {
        t_steps: t,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Forward noising: `x_i = sqrt(alpha_bar_i) x0 + sqrt(1 - alpha_bar_i) eps`.
pub fn q_sample(
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    i: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    schedule.check_step(i)?;
    if eps.shape() != x0.shape() {
        return Err(Error::shape(
            format!("{:?}", x0.shape()),
            format!("{:?}", eps.shape()),
        ));
    }
    let ab = schedule.alpha_bar(i);
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0.scale(signal).add(&eps.scale(noise))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.3, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 1.0 - 0.3);
    }

    #[test]
    fn invalid_beta_range_rejected() {
        assert!(make_schedule(10, 0.0, 0.5).is_err());
        assert!(make_schedule(10, 0.5, 0.3).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
        assert!(make_schedule(0, 0.1, 0.2).is_err());
    }

    // Independent direct-product oracle over the default schedule. The
    // closing value was frozen from that product: 4.0358e-5.
    #[test]
    fn default_schedule_matches_direct_product() {
        let t = 1000;
        let (bs, be) = (1e-4, 0.02);
        let s = make_schedule(t, bs, be).unwrap();
        let mut product = 1.0f64;
        for i in 0..t {
            let beta = bs + (be - bs) * i as f64 / (t - 1) as f64;
            product *= 1.0 - beta;
            assert!((s.alpha_bar(i + 1) - product).abs() <= 1e-18 * (i + 1) as f64);
        }
        assert!((product - 4.0358297653756754e-5).abs() < 1e-12);
        assert!(s.alpha_bar(t) < 1e-3);
    }

    proptest! {
        #[test]
        fn alpha_bar_strictly_decreasing(
            t in 1usize..200,
            bs in 1e-5f64..0.1,
            spread in 0.0f64..0.3,
        ) {
            let be = (bs + spread).min(0.99);
            let s = make_schedule(t, bs, be).unwrap();
            for i in 1..t {
                prop_assert!(s.alpha_bars[i] < s.alpha_bars[i - 1]);
            }
            prop_assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        }

        // q_sample(s, a*x0, i, a*eps) = a * q_sample(s, x0, i, eps)
        fn q_sample_is_linear(a in -3.0f64..3.0, i in 1usize..50) {
            let s = make_schedule(50, 1e-4, 0.05).unwrap();
            let x0 = Tensor::vector(&[0.4, -1.2, 2.0]).unwrap();
            let eps = Tensor::vector(&[1.0, 0.5, -0.7]).unwrap();
            let lhs = q_sample(&s, &x0.scale(a), i, &eps.scale(a)).unwrap();
            let rhs = q_sample(&s, &x0, i, &eps).unwrap().scale(a);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn q_sample_no_noise_limit() {
        // crafted schedule with alpha_bar = 1 (hypothetical)
        let s = DiffusionSchedule {
            t_steps: 1,
            betas: vec![0.0],
            alphas: vec![1.0],
            alpha_bars: vec![1.0],
        };
        let x0 = Tensor::vector(&[0.3, -0.8]).unwrap();
        let eps = Tensor::vector(&[5.0, 5.0]).unwrap();
        let out = q_sample(&s, &x0, 1, &eps).unwrap();
        assert_eq!(out.data(), x0.data());
    }

    #[test]
    fn q_sample_pure_noise_limit() {
        let s = DiffusionSchedule {
            t_steps: 1,
            betas: vec![1.0],
            alphas: vec![0.0],
            alpha_bars: vec![0.0],
        };
        let x0 = Tensor::vector(&[0.3, -0.8]).unwrap();
        let eps = Tensor::vector(&[5.0, -2.0]).unwrap();
        let out = q_sample(&s, &x0, 1, &eps).unwrap();
        assert_eq!(out.data(), eps.data());
    }

    #[test]
    fn q_sample_three_quarters() {
        let s = DiffusionSchedule {
            t_steps: 1,
            betas: vec![0.25],
            alphas: vec![0.75],
            alpha_bars: vec![0.75],
        };
        let x0 = Tensor::zeros(&[4]);
        let eps = Tensor::filled(&[4], 1.0).unwrap();
        let out = q_sample(&s, &x0, 1, &eps).unwrap();
        for &v in out.data() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn q_sample_rejects_bad_index() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x = Tensor::zeros(&[2]);
        assert!(q_sample(&s, &x, 0, &x).is_err());
        assert!(q_sample(&s, &x, 11, &x).is_err());
    }
}
