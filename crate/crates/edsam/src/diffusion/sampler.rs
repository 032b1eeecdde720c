//! Ancestral and deterministic samplers plus deterministic inversion.

use crate::coremath::{standard_normal, SeededRng};
use crate::error::{Error, Result};
use crate::{Real, Tensor};

use super::{Denoiser, DiffusionSchedule};

/// Step-subsequence sampler configuration. `eta = 0` is fully
/// deterministic; `eta = 1` matches the ancestral variance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: Real,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 10, eta: 0.0 }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize, eta: Real) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("sampler needs steps >= 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must be in [0,1], got {eta}")));
        }
        Ok(SamplerConfig { steps, eta })
    }

    /// Strictly increasing step grid ending at `t`.
    pub fn grid(&self, t: usize) -> Result<Vec<usize>> {
        if self.steps == 0 || self.steps > t {
            return Err(Error::invalid(format!(
                "steps {} out of range 1..={t}",
                self.steps
            )));
        }
        let grid: Vec<usize> = (1..=self.steps)
            .map(|j| ((j * t) as f64 / self.steps as f64).round() as usize)
            .collect();
        if grid[0] == 0 || grid.windows(2).any(|w| w[1] <= w[0]) || *grid.last().unwrap() != t {
            return Err(Error::invalid(format!(
                "degenerate step grid for steps={} t={t}",
                self.steps
            )));
        }
        Ok(grid)
    }
}

/// Ancestral sampling over all schedule steps. Draw order: the initial
/// noise first, then one noise vector per step except the last.
pub fn ddpm_sample(
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    cond: Option<usize>,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let dim = denoiser.data_dim;
    let mut x: Tensor = standard_normal(rng, &[dim]);
    for i in (1..=schedule.t_steps).rev() {
        let eps_hat = denoiser.predict(&x, i, cond)?;
        let beta = schedule.beta(i);
        let coef = beta / (1.0 - schedule.alpha_bar(i)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(i).sqrt();
        let mean = x.sub(&eps_hat.scale(coef))?.scale(inv_sqrt_alpha);
        x = if i > 1 {
            let z = standard_normal(rng, &[dim]);
            mean.add(&z.scale(beta.sqrt()))?
        } else {
            mean
        };
    }
    x.validate_finite("ddpm_sample")?;
    Ok(x)
}

/// One deterministic-sampler update from grid time `t` down to `prev`
/// (`prev = 0` means the data endpoint, where the cumulative product is 1).
fn ddim_step(
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    x: &Tensor,
    t: usize,
    prev: usize,
    cond: Option<usize>,
    eta: Real,
    rng: Option<&mut SeededRng>,
) -> Result<Tensor> {
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_or_one(prev);
    let eps_hat = denoiser.predict(x, t, cond)?;
    let x0_hat = x
        .sub(&eps_hat.scale((1.0 - ab_t).sqrt()))?
        .scale(1.0 / ab_t.sqrt());
    let sigma = if eta > 0.0 && prev > 0 {
        eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt()
    } else {
        0.0
    };
    let dir_coef = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut next = x0_hat
        .scale(ab_prev.sqrt())
        .add(&eps_hat.scale(dir_coef))?;
    if sigma > 0.0 {
        let rng = rng.expect("rng required when eta > 0");
        let z = standard_normal(rng, &[denoiser.data_dim]);
        next = next.add(&z.scale(sigma))?;
    }
    Ok(next)
}

/// Deterministic (or `eta`-stochastic) sampling from a latent `z` down the
/// grid to data. Bit-reproducible for `eta = 0`.
pub fn ddim_sample(
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    z: &Tensor,
    cond: Option<usize>,
    sampler: &SamplerConfig,
    mut rng: Option<&mut SeededRng>,
) -> Result<Tensor> {
    if z.shape() != [denoiser.data_dim] {
        return Err(Error::shape(
            format!("[{}]", denoiser.data_dim),
            format!("{:?}", z.shape()),
        ));
    }
    if sampler.eta > 0.0 && rng.is_none() {
        return Err(Error::invalid("eta > 0 sampling requires an rng"));
    }
    let grid = sampler.grid(schedule.t_steps)?;
    let mut x = z.clone();
    for idx in (0..grid.len()).rev() {
        let t = grid[idx];
        let prev = if idx == 0 { 0 } else { grid[idx - 1] };
        x = ddim_step(
            denoiser,
            schedule,
            &x,
            t,
            prev,
            cond,
            sampler.eta,
            rng.as_deref_mut(),
        )?;
    }
    x.validate_finite("ddim_sample")?;
    Ok(x)
}

/// First-order inversion of the deterministic sampler: runs the update in
/// reverse grid order, evaluating the noise prediction at the current
/// point with the segment's upper step index. Only defined for `eta = 0`.
pub fn ddim_invert(
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    x0: &Tensor,
    cond: Option<usize>,
    sampler: &SamplerConfig,
) -> Result<Tensor> {
    if sampler.eta != 0.0 {
        return Err(Error::invalid(
            "inversion is defined only for the deterministic sampler (eta = 0)",
        ));
    }
    if x0.shape() != [denoiser.data_dim] {
        return Err(Error::shape(
            format!("[{}]", denoiser.data_dim),
            format!("{:?}", x0.shape()),
        ));
    }
    let grid = sampler.grid(schedule.t_steps)?;
    let mut x = x0.clone();
    for idx in 0..grid.len() {
        let t = grid[idx];
        let prev = if idx == 0 { 0 } else { grid[idx - 1] };
        let ab_t = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar_or_one(prev);
        let eps_hat = denoiser.predict(&x, t, cond)?;
        let x0_hat = x
            .sub(&eps_hat.scale((1.0 - ab_prev).sqrt()))?
            .scale(1.0 / ab_prev.sqrt());
        x = x0_hat
            .scale(ab_t.sqrt())
            .add(&eps_hat.scale((1.0 - ab_t).sqrt()))?;
    }
    x.validate_finite("ddim_invert")?;
    Ok(x)
}
