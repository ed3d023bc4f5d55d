//! Diffusion schedule, score-distillation gradients and noise providers.

mod crop;
mod schedule;
mod wire;

pub use crop::*;
pub use schedule::*;
pub use wire::*;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

/// Relative spherical camera change from the condition view to the target view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
}

/// One noise-prediction call. `z_t` and `condition` are `[-1, 1]` images.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceRequest {
    pub z_t: ImageBuffer,
    pub condition: ImageBuffer,
    pub t: usize,
    pub delta_camera: DeltaCamera,
}

impl GuidanceRequest {
    pub fn validate(&self, steps: usize) -> Result<()> {
        self.z_t.same_shape(&self.condition)?;
        if self.t == 0 || self.t >= steps {
            return Err(Error::Bounds(format!("timestep {} outside 1..{steps}", self.t)));
        }
        self.z_t.validate_finite()?;
        self.condition.validate_finite()
    }
}

/// What a provider may see besides the request itself. The injected noise and
/// the clean target are only meaningful to the in-process test providers.
pub struct NoiseQuery<'a> {
    pub request: &'a GuidanceRequest,
    pub noise: &'a ImageBuffer,
    pub alpha_bar: f64,
    /// Clean target in `[-1, 1]`, cropped and resized like the render.
    pub target: Option<&'a ImageBuffer>,
}

pub trait NoiseProvider {
    fn name(&self) -> &str;
    fn predict(&mut self, query: &NoiseQuery) -> Result<ImageBuffer>;
    fn needs_target(&self) -> bool {
        false
    }
}

/// Returns the injected noise, so every SDS gradient is zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockProvider;

impl NoiseProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn predict(&mut self, q: &NoiseQuery) -> Result<ImageBuffer> {
        Ok(q.noise.clone())
    }
}

/// Predicts the noise that would map the clean target to `z_t`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleProvider;

impl NoiseProvider for OracleProvider {
    fn name(&self) -> &str {
        "oracle"
    }

    fn needs_target(&self) -> bool {
        true
    }

    fn predict(&mut self, q: &NoiseQuery) -> Result<ImageBuffer> {
        let target = q
            .target
            .ok_or_else(|| Error::ProviderUnavailable("oracle provider needs a target image".into()))?;
        let z = &q.request.z_t;
        z.same_shape(target)?;
        let (sa, sn) = (q.alpha_bar.sqrt(), (1.0 - q.alpha_bar).sqrt());
        let data = z.data().iter().zip(target.data()).map(|(z, x)| (z - sa * x) / sn).collect();
        ImageBuffer::from_vec(z.width(), z.height(), z.channels(), data)
    }
}

/// Crops and resizes a full-resolution image to the guidance input, in `[-1, 1]`.
pub fn prepare_guidance_image(img: &ImageBuffer, crop: &CropWindow, background: &[f64]) -> ImageBuffer {
    to_signed(&crop.resample(img, GUIDANCE_SIZE, background))
}

pub struct SdsInputs<'a> {
    /// Full-resolution render in `[0, 1]`.
    pub render: &'a ImageBuffer,
    /// Foreground of the render; defines the crop.
    pub mask: &'a ImageBuffer,
    /// Guidance-resolution condition image in `[-1, 1]`.
    pub condition: &'a ImageBuffer,
    pub delta_camera: DeltaCamera,
    pub background: &'a [f64],
    /// Full-resolution clean target for providers that need one.
    pub target: Option<&'a ImageBuffer>,
}

#[derive(Clone, Debug)]
pub struct SdsOutcome {
    /// Gradient on the full-resolution render.
    pub gradient: ImageBuffer,
    pub timestep: usize,
    pub skipped: bool,
    pub crop: CropWindow,
}

impl SdsOutcome {
    pub fn norm(&self) -> f64 {
        self.gradient.norm()
    }
}

/// Score-distillation gradient `w(t) (eps_hat - eps)` pulled back through the
/// crop and resize onto the render. The noise predictor's Jacobian is not used.
/// An unavailable provider yields a zero gradient with `skipped` set.
pub fn sds_gradient(
    inputs: &SdsInputs,
    schedule: &DiffusionSchedule,
    provider: &mut dyn NoiseProvider,
    rng: &mut impl Rng,
) -> Result<SdsOutcome> {
    let render = inputs.render;
    render.check_mask(inputs.mask)?;
    let crop = CropWindow::from_mask(inputs.mask)?;
    let n = GUIDANCE_SIZE;
    if inputs.condition.width() != n || inputs.condition.height() != n {
        return Err(Error::shape(format!("{n}x{n} condition"), inputs.condition.shape_string()));
    }
    let x = prepare_guidance_image(render, &crop, inputs.background);
    let t = schedule.sample_timestep(rng);
    let eps = standard_normal(n, n, render.channels(), rng);
    let z_t = add_noise_signed(&x, t, &eps, schedule)?;
    let target = inputs.target.map(|t| prepare_guidance_image(t, &crop, inputs.background));
    let request = GuidanceRequest {
        z_t,
        condition: inputs.condition.clone(),
        t,
        delta_camera: inputs.delta_camera,
    };
    request.validate(schedule.steps())?;
    let alpha_bar = schedule.alpha_bar(t)?;
    let query = NoiseQuery {
        request: &request,
        noise: &eps,
        alpha_bar,
        target: target.as_ref(),
    };
    let zero = || ImageBuffer::new(render.width(), render.height(), render.channels());
    let eps_hat = match provider.predict(&query) {
        Ok(e) => e,
        Err(Error::ProviderUnavailable(msg)) => {
            log::warn!("{} provider unavailable, SDS step skipped: {msg}", provider.name());
            return Ok(SdsOutcome {
                gradient: zero(),
                timestep: t,
                skipped: true,
                crop,
            });
        }
        Err(e) => return Err(e),
    };
    eps_hat.same_shape(&eps)?;
    let w = schedule.weight(t)?;
    let data = eps_hat.data().iter().zip(eps.data()).map(|(a, b)| w * (a - b)).collect();
    let g = ImageBuffer::from_vec(n, n, render.channels(), data)?;
    Ok(SdsOutcome {
        gradient: crop.resample_adjoint(&g, render.width(), render.height()),
        timestep: t,
        skipped: false,
        crop,
    })
}
