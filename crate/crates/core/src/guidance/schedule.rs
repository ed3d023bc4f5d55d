use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Unit,
    OneMinusAlphaBar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weighting: Weighting,
    /// Timesteps are drawn uniformly from `[t_min, t_max] * steps`.
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            weighting: Weighting::Unit,
            t_min: 0.02,
            t_max: 0.98,
        }
    }
}

/// Linear-beta DDPM schedule. Index `t` runs over `0..steps` and
/// `alpha_bar[t] = prod_{s <= t} (1 - beta[s])`.
#[derive(Clone, Debug)]
pub struct DiffusionSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let c = &config;
        if c.steps < 2 || !(0.0 < c.beta_start && c.beta_start <= c.beta_end && c.beta_end < 1.0) {
            return Err(Error::validation("diffusion schedule needs >= 2 steps and 0 < beta_start <= beta_end < 1"));
        }
        if !(0.0 < c.t_min && c.t_min <= c.t_max && c.t_max < 1.0) {
            return Err(Error::validation("timestep range must satisfy 0 < t_min <= t_max < 1"));
        }
        let n = c.steps;
        let betas: Vec<f64> = (0..n)
            .map(|i| c.beta_start + (c.beta_end - c.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(DiffusionSchedule {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or_else(|| Error::Bounds(format!("timestep {t} outside 0..{}", self.steps())))
    }

    pub fn weight(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(match self.config.weighting {
            Weighting::Unit => 1.0,
            Weighting::OneMinusAlphaBar => 1.0 - a,
        })
    }

    pub fn timestep_range(&self) -> (usize, usize) {
        let n = self.steps() as f64;
        let lo = (self.config.t_min * n).round() as usize;
        let hi = (self.config.t_max * n).round() as usize;
        (lo.max(1), hi.min(self.steps() - 1).max(lo.max(1)))
    }

    pub fn sample_timestep(&self, rng: &mut impl Rng) -> usize {
        let (lo, hi) = self.timestep_range();
        rng.gen_range(lo..=hi)
    }
}

/// Maps `[0, 1]` to `[-1, 1]`.
pub fn to_signed(img: &ImageBuffer) -> ImageBuffer {
    img.map(|v| 2.0 * v - 1.0)
}

pub fn standard_normal(w: usize, h: usize, c: usize, rng: &mut impl Rng) -> ImageBuffer {
    let data = (0..w * h * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    ImageBuffer::from_vec(w, h, c, data).expect("sized buffer")
}

/// `z_t = sqrt(alpha_bar) x + sqrt(1 - alpha_bar) eps` for an image already in `[-1, 1]`.
pub fn add_noise_signed(x: &ImageBuffer, t: usize, eps: &ImageBuffer, schedule: &DiffusionSchedule) -> Result<ImageBuffer> {
    x.same_shape(eps)?;
    let a = schedule.alpha_bar(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x.data().iter().zip(eps.data()).map(|(x, e)| sa * x + sn * e).collect();
    ImageBuffer::from_vec(x.width(), x.height(), x.channels(), data)
}

/// Noises an image given in `[0, 1]`; it is mapped to `[-1, 1]` first.
pub fn add_noise(x: &ImageBuffer, t: usize, eps: &ImageBuffer, schedule: &DiffusionSchedule) -> Result<ImageBuffer> {
    add_noise_signed(&to_signed(x), t, eps, schedule)
}
