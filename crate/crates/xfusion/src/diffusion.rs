//! Variance schedules and forward/reverse diffusion steps over image grids.
//!
//! Timesteps are 1-indexed: `t = 1..=t_max` are noising steps, `t = 0` is
//! clean data. `alpha_bar(0)` is defined as 1 so code blending a grid at the
//! destination level `t - 1` needs no special case at `t = 1`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{ScheduleConfig, ScheduleKind};
use crate::error::{Error, Result};

/// Per-timestep diffusion rates and their cumulative complement products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly interpolated rates from `beta_min` (t = 1) to `beta_max`
    /// (t = T), with the cumulative product over `1 - beta`.
    pub fn new(t_max: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::Invalid("schedule: t_max must be at least 1".into()));
        }
        if !(beta_min > 0.0) {
            return Err(Error::Invalid("schedule: beta_min must be > 0".into()));
        }
        if beta_min > beta_max {
            return Err(Error::Invalid("schedule: beta_min must be <= beta_max".into()));
        }
        if !(beta_max < 1.0) {
            return Err(Error::Invalid("schedule: beta_max must be < 1".into()));
        }
        let ScheduleKind::Linear = kind;
        let beta: Vec<f64> = if t_max == 1 {
            vec![beta_min]
        } else {
            (0..t_max)
                .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (t_max - 1) as f64)
                .collect()
        };
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut product = 1.0;
        for b in &beta {
            product *= 1.0 - b;
            alpha_bar.push(product);
        }
        Ok(NoiseSchedule { beta, alpha_bar })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.t_max, cfg.beta_min, cfg.beta_max, cfg.kind)
    }

    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `t` in `1..=t_max`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.t_max(), "beta({t}) out of range");
        self.beta[t - 1]
    }

    /// Cumulative product at `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max(), "alpha_bar({t}) out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize, what: &str) -> Result<()> {
        if t < 1 || t > self.t_max() {
            return Err(Error::Invalid(format!(
                "{what}: timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }
}

pub fn standard_normal_like(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal))
}

/// Closed-form jump to timestep `t`:
/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_sample(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    schedule.check_t(t, "forward_sample")?;
    if x0.dim() != eps.dim() {
        return Err(Error::shape(
            "forward_sample",
            format!("{:?}", x0.dim()),
            format!("{:?}", eps.dim()),
        ));
    }
    let ab = schedule.alpha_bar(t);
    Ok(x0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Stepwise Markov corruption: applies
/// `x_s = sqrt(1 - beta_s) * x_{s-1} + sqrt(beta_s) * eps_s` for `s = 1..=t`.
/// Statistical oracle for [`forward_sample`]; not used on hot paths.
pub fn forward_chain(
    x0: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    schedule.check_t(t, "forward_chain")?;
    let mut x = x0.clone();
    for s in 1..=t {
        let b = schedule.beta(s);
        let eps = standard_normal_like(x.dim(), rng);
        x = &x * (1.0 - b).sqrt() + &eps * b.sqrt();
    }
    Ok(x)
}

/// One ancestral reverse step with fixed variance `beta_t * I`:
/// mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(1 - beta_t)`,
/// plus `sqrt(beta_t) * z`. The noise `z` is suppressed (and not drawn) at the
/// final step `t = 1`.
pub fn reverse_step(
    x_t: &Array2<f64>,
    t: usize,
    eps_hat: &Array2<f64>,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    schedule.check_t(t, "reverse_step")?;
    if x_t.dim() != eps_hat.dim() {
        return Err(Error::shape(
            "reverse_step",
            format!("{:?}", x_t.dim()),
            format!("{:?}", eps_hat.dim()),
        ));
    }
    let b = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let mean = (x_t - &(eps_hat * (b / (1.0 - ab).sqrt()))) / (1.0 - b).sqrt();
    if t == 1 {
        return Ok(mean);
    }
    let z = standard_normal_like(x_t.dim(), rng);
    Ok(mean + z * b.sqrt())
}
