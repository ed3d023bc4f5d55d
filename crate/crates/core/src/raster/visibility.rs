use super::gaussians::GaussianSet;
use super::render::{prepare, render, Attribute, RasterConfig};
use crate::error::{Error, Result};
use crate::scene::{Camera, ImageBuffer};

/// Local opacity a splat must exceed at a pixel to count as that ray's first hit.
pub const HIT_THRESHOLD: f64 = 0.5;
/// Accumulated alpha at or above which a pixel is foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.5;
/// Rendered visibility at or above which a foreground pixel is "visible".
pub const VISIBLE_THRESHOLD: f64 = 0.5;

/// Marks, for every pixel ray, the nearest splat whose local alpha exceeds
/// [`HIT_THRESHOLD`]. `flags` is indexed like `posed` (canonical indices) and
/// only ever gains `true` entries. Returns the number of newly marked Gaussians.
pub fn mark_visibility(
    posed: &GaussianSet,
    camera: &Camera,
    config: &RasterConfig,
    flags: &mut [bool],
) -> Result<usize> {
    if flags.len() != posed.len() {
        return Err(Error::shape(format!("{} flags", posed.len()), flags.len()));
    }
    let p = prepare(posed, camera, config)?;
    let mut newly = 0;
    for y in 0..camera.height() {
        for x in 0..camera.width() {
            for &gi in p.candidates(x, y) {
                let gi = gi as usize;
                let s = p.splat(gi).unwrap();
                let Some(ev) = p.raw_alpha(s, posed.opacities[gi], x, y) else { continue };
                if ev.raw.min(config.alpha_max) > HIT_THRESHOLD {
                    if !flags[gi] {
                        flags[gi] = true;
                        newly += 1;
                    }
                    break;
                }
            }
        }
    }
    Ok(newly)
}

/// [`mark_visibility`] with `factor` x `factor` rays per pixel.
pub fn mark_visibility_supersampled(
    posed: &GaussianSet,
    camera: &Camera,
    config: &RasterConfig,
    factor: usize,
    flags: &mut [bool],
) -> Result<usize> {
    if factor == 0 {
        return Err(Error::validation("supersampling factor must be at least 1"));
    }
    let fine = camera.with_intrinsics(camera.intrinsics.scaled(factor))?;
    mark_visibility(posed, &fine, config, flags)
}

#[derive(Clone, Debug)]
pub struct VisibilityRender {
    pub map: ImageBuffer,
    pub foreground: ImageBuffer,
    pub foreground_pixels: usize,
    pub visible_pixels: usize,
}

impl VisibilityRender {
    /// `|visible| / |foreground|`, or `None` for an empty foreground.
    pub fn ratio(&self) -> Option<f64> {
        (self.foreground_pixels > 0).then(|| self.visible_pixels as f64 / self.foreground_pixels as f64)
    }
}

/// Splats the visibility flags stored on `posed` and classifies pixels.
pub fn render_visibility(posed: &GaussianSet, camera: &Camera, config: &RasterConfig) -> Result<VisibilityRender> {
    let out = render(posed, Attribute::Visibility, camera, &[0.0], config)?;
    let mut foreground = ImageBuffer::new(camera.width(), camera.height(), 1);
    let (mut fg, mut vis) = (0, 0);
    for (i, &a) in out.alpha.data().iter().enumerate() {
        if a >= FOREGROUND_THRESHOLD {
            foreground.data_mut()[i] = 1.0;
            fg += 1;
            if out.image.data()[i] >= VISIBLE_THRESHOLD {
                vis += 1;
            }
        }
    }
    Ok(VisibilityRender {
        map: out.image,
        foreground,
        foreground_pixels: fg,
        visible_pixels: vis,
    })
}
