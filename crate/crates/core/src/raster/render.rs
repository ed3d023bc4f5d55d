use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gaussians::{GaussianSet, ParamGrads};
use super::project::{project_backward, project_gaussian, Splat2D};
use crate::error::{Error, Result};
use crate::scene::{Camera, ImageBuffer, Vec3};

/// Compositing constants. `exact` disables every cutoff (3-sigma extent,
/// low-alpha skip, early termination) but keeps the alpha clamp and blur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RasterConfig {
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub transmittance_min: f64,
    pub sigma_extent: f64,
    pub blur: f64,
    pub tile_size: usize,
    pub exact: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            sigma_extent: 3.0,
            blur: 0.3,
            tile_size: 16,
            exact: false,
        }
    }
}

impl RasterConfig {
    pub fn exact() -> Self {
        RasterConfig {
            exact: true,
            ..Default::default()
        }
    }
}

/// Which per-Gaussian quantity is splatted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    /// Normals rotated into the camera frame.
    Normal,
    /// Binary visibility flags as a single channel.
    Visibility,
}

impl Attribute {
    pub fn channels(self) -> usize {
        match self {
            Attribute::Color | Attribute::Normal => 3,
            Attribute::Visibility => 1,
        }
    }
}

/// Projected, depth-sorted and tile-binned splats for one camera.
#[derive(Debug)]
pub struct Prepared {
    splats: Vec<Option<Splat2D>>,
    width: usize,
    height: usize,
    tile_size: usize,
    tiles_x: usize,
    tile_offsets: Vec<usize>,
    tile_items: Vec<u32>,
    config: RasterConfig,
}

impl Prepared {
    pub fn splat(&self, k: usize) -> Option<&Splat2D> {
        self.splats[k].as_ref()
    }

    pub fn config(&self) -> &RasterConfig {
        &self.config
    }

    fn tile_list(&self, x: usize, y: usize) -> &[u32] {
        let t = (y / self.tile_size) * self.tiles_x + x / self.tile_size;
        &self.tile_items[self.tile_offsets[t]..self.tile_offsets[t + 1]]
    }

    /// Per-pixel depth-ordered candidate splats.
    pub(crate) fn candidates(&self, x: usize, y: usize) -> &[u32] {
        self.tile_list(x, y)
    }

    /// Local opacity of splat `s` at pixel `(x, y)` before the `alpha_max` clamp,
    /// or `None` when the pixel is outside its cutoff extent.
    #[inline]
    pub(crate) fn raw_alpha(&self, s: &Splat2D, opacity: f64, x: usize, y: usize) -> Option<PixelEval> {
        let dx = x as f64 + 0.5 - s.mean2d[0];
        let dy = y as f64 + 0.5 - s.mean2d[1];
        if !self.config.exact && (dx.abs() > s.radius || dy.abs() > s.radius) {
            return None;
        }
        let [a, b, c] = s.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        let g = power.exp();
        Some(PixelEval {
            dx,
            dy,
            g,
            raw: opacity * g,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PixelEval {
    pub dx: f64,
    pub dy: f64,
    pub g: f64,
    pub raw: f64,
}

pub fn prepare(set: &GaussianSet, camera: &Camera, config: &RasterConfig) -> Result<Arc<Prepared>> {
    let (width, height) = (camera.width(), camera.height());
    if width == 0 || height == 0 {
        return Err(Error::Bounds("zero-size image".into()));
    }
    if set.rotations.len() != set.len() || set.scales.len() != set.len() || set.opacities.len() != set.len() {
        return Err(Error::shape(
            format!("{} rotations/scales/opacities", set.len()),
            format!("{}/{}/{}", set.rotations.len(), set.scales.len(), set.opacities.len()),
        ));
    }
    let splats: Vec<Option<Splat2D>> = (0..set.len())
        .map(|k| {
            project_gaussian(&set.centers[k], &set.scales[k], &set.rotations[k], camera, config.blur).map(|mut s| {
                s.gaussian_index = k;
                s.radius = s.radius / 3.0 * config.sigma_extent;
                s
            })
        })
        .collect();
    let mut order: Vec<usize> = (0..set.len()).filter(|&k| splats[k].is_some()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (splats[a].unwrap().depth, splats[b].unwrap().depth);
        da.total_cmp(&db).then(a.cmp(&b))
    });

    let tile_size = if config.exact { width.max(height) } else { config.tile_size.max(1) };
    let tiles_x = width.div_ceil(tile_size);
    let tiles_y = height.div_ceil(tile_size);
    let n_tiles = tiles_x * tiles_y;

    let tile_range = |s: &Splat2D| -> Option<(usize, usize, usize, usize)> {
        if config.exact {
            return Some((0, 0, 0, 0));
        }
        let px0 = (s.mean2d[0] - s.radius - 0.5).ceil().max(0.0);
        let py0 = (s.mean2d[1] - s.radius - 0.5).ceil().max(0.0);
        let px1 = (s.mean2d[0] + s.radius - 0.5).floor().min(width as f64 - 1.0);
        let py1 = (s.mean2d[1] + s.radius - 0.5).floor().min(height as f64 - 1.0);
        if px0 > px1 || py0 > py1 {
            return None;
        }
        Some((
            px0 as usize / tile_size,
            py0 as usize / tile_size,
            px1 as usize / tile_size,
            py1 as usize / tile_size,
        ))
    };

    let mut counts = vec![0usize; n_tiles + 1];
    for &k in &order {
        if let Some((tx0, ty0, tx1, ty1)) = tile_range(splats[k].as_ref().unwrap()) {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    counts[ty * tiles_x + tx + 1] += 1;
                }
            }
        }
    }
    for t in 0..n_tiles {
        counts[t + 1] += counts[t];
    }
    let tile_offsets = counts.clone();
    let mut cursor = counts;
    let mut tile_items = vec![0u32; tile_offsets[n_tiles]];
    for &k in &order {
        if let Some((tx0, ty0, tx1, ty1)) = tile_range(splats[k].as_ref().unwrap()) {
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    let t = ty * tiles_x + tx;
                    tile_items[cursor[t]] = k as u32;
                    cursor[t] += 1;
                }
            }
        }
    }

    Ok(Arc::new(Prepared {
        splats,
        width,
        height,
        tile_size,
        tiles_x,
        tile_offsets,
        tile_items,
        config: *config,
    }))
}

/// Per-Gaussian attribute rows (`channels` values each).
pub fn attribute_values(set: &GaussianSet, attribute: Attribute, camera: &Camera) -> Result<Vec<f64>> {
    let values: Vec<f64> = match attribute {
        Attribute::Color => set.colors.iter().flat_map(|c| [c.x, c.y, c.z]).collect(),
        Attribute::Normal => {
            let r = camera.rotation();
            set.normals
                .iter()
                .flat_map(|n| {
                    let v = r * n;
                    [v.x, v.y, v.z]
                })
                .collect()
        }
        Attribute::Visibility => set.visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    };
    if values.len() != set.len() * attribute.channels() {
        return Err(Error::shape(
            format!("{} {attribute:?} values", set.len()),
            values.len() / attribute.channels(),
        ));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "non-finite {attribute:?} attribute on gaussian {}",
            i / attribute.channels()
        )));
    }
    Ok(values)
}

/// Rendered attribute image plus the state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: ImageBuffer,
    /// Accumulated opacity `1 - T_final`, one channel.
    pub alpha: ImageBuffer,
    pub attribute: Attribute,
    prepared: Arc<Prepared>,
    /// Number of candidate-list entries consumed per pixel.
    last: Vec<u32>,
    final_t: Vec<f64>,
    background: Vec<f64>,
}

impl RenderOutput {
    pub fn prepared(&self) -> &Arc<Prepared> {
        &self.prepared
    }

    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_t
    }

    /// Sum of compositing weights at one pixel, recomputed from the state.
    pub fn weight_sum(&self, set: &GaussianSet, x: usize, y: usize) -> f64 {
        let p = &self.prepared;
        let cfg = p.config;
        let list = p.candidates(x, y);
        let n = self.last[y * p.width + x] as usize;
        let mut t = 1.0;
        let mut sum = 0.0;
        for &gi in &list[..n] {
            let s = p.splats[gi as usize].as_ref().unwrap();
            let Some(ev) = p.raw_alpha(s, set.opacities[gi as usize], x, y) else { continue };
            let alpha = ev.raw.min(cfg.alpha_max);
            if !cfg.exact && alpha < cfg.alpha_min {
                continue;
            }
            sum += alpha * t;
            t *= 1.0 - alpha;
        }
        sum
    }
}

/// Front-to-back compositing of one attribute over a prepared splat list.
pub fn composite(
    prepared: &Arc<Prepared>,
    set: &GaussianSet,
    attribute: Attribute,
    camera: &Camera,
    background: &[f64],
) -> Result<RenderOutput> {
    let ch = attribute.channels();
    if background.len() != ch {
        return Err(Error::shape(format!("{ch} background channels"), background.len()));
    }
    let values = attribute_values(set, attribute, camera)?;
    let p = prepared;
    let cfg = p.config;
    let (w, h) = (p.width, p.height);
    let mut image = ImageBuffer::new(w, h, ch);
    let mut alpha_img = ImageBuffer::new(w, h, 1);
    let mut last = vec![0u32; w * h];
    let mut final_t = vec![1.0; w * h];
    let mut acc = [0.0f64; 3];

    for y in 0..h {
        for x in 0..w {
            let list = p.candidates(x, y);
            let mut t = 1.0;
            acc[..ch].fill(0.0);
            let mut used = 0usize;
            for (pos, &gi) in list.iter().enumerate() {
                let gi = gi as usize;
                let s = p.splats[gi].as_ref().unwrap();
                let Some(ev) = p.raw_alpha(s, set.opacities[gi], x, y) else { continue };
                let alpha = ev.raw.min(cfg.alpha_max);
                if !cfg.exact && alpha < cfg.alpha_min {
                    continue;
                }
                let wgt = alpha * t;
                for c in 0..ch {
                    acc[c] += wgt * values[gi * ch + c];
                }
                t *= 1.0 - alpha;
                used = pos + 1;
                if !cfg.exact && t < cfg.transmittance_min {
                    break;
                }
            }
            let px = image.pixel_mut(x, y);
            for c in 0..ch {
                px[c] = acc[c] + t * background[c];
            }
            alpha_img.set(x, y, 0, 1.0 - t);
            last[y * w + x] = used as u32;
            final_t[y * w + x] = t;
        }
    }

    Ok(RenderOutput {
        image,
        alpha: alpha_img,
        attribute,
        prepared: prepared.clone(),
        last,
        final_t,
        background: background.to_vec(),
    })
}

pub fn render(
    set: &GaussianSet,
    attribute: Attribute,
    camera: &Camera,
    background: &[f64],
    config: &RasterConfig,
) -> Result<RenderOutput> {
    let prepared = prepare(set, camera, config)?;
    composite(&prepared, set, attribute, camera, background)
}

/// Screen-space gradient accumulators, indexed by Gaussian.
#[derive(Clone, Debug)]
pub struct ScreenGrads {
    pub d_mean2d: Vec<[f64; 2]>,
    pub d_conic: Vec<[f64; 3]>,
    pub d_opacity: Vec<f64>,
}

impl ScreenGrads {
    pub fn zeros(k: usize) -> Self {
        ScreenGrads {
            d_mean2d: vec![[0.0; 2]; k],
            d_conic: vec![[0.0; 3]; k],
            d_opacity: vec![0.0; k],
        }
    }
}

/// Reverse pass of [`composite`]: accumulates screen-space gradients into
/// `screen` and returns the gradient with respect to the attribute rows.
/// Depth order is treated as locally constant.
pub fn composite_backward(
    set: &GaussianSet,
    camera: &Camera,
    output: &RenderOutput,
    grad_image: &ImageBuffer,
    screen: &mut ScreenGrads,
) -> Result<Vec<f64>> {
    output.image.same_shape(grad_image)?;
    let attribute = output.attribute;
    let ch = attribute.channels();
    let values = attribute_values(set, attribute, camera)?;
    let p = &output.prepared;
    if p.splats.len() != set.len() || screen.d_opacity.len() != set.len() {
        return Err(Error::State("gaussian set changed between forward and backward".into()));
    }
    let cfg = p.config;
    let mut d_values = vec![0.0; values.len()];
    let mut suffix = [0.0f64; 3];

    for y in 0..p.height {
        for x in 0..p.width {
            let g = grad_image.pixel(x, y);
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let list = p.candidates(x, y);
            let n = output.last[y * p.width + x] as usize;
            let mut t = output.final_t[y * p.width + x];
            for c in 0..ch {
                suffix[c] = output.background[c] * t;
            }
            for &gi in list[..n].iter().rev() {
                let gi = gi as usize;
                let s = p.splats[gi].as_ref().unwrap();
                let Some(ev) = p.raw_alpha(s, set.opacities[gi], x, y) else { continue };
                let clamped = ev.raw > cfg.alpha_max;
                let alpha = ev.raw.min(cfg.alpha_max);
                if !cfg.exact && alpha < cfg.alpha_min {
                    continue;
                }
                t /= 1.0 - alpha;
                let wgt = alpha * t;
                let mut d_alpha = 0.0;
                for c in 0..ch {
                    let v = values[gi * ch + c];
                    d_values[gi * ch + c] += wgt * g[c];
                    d_alpha += g[c] * (v * t - suffix[c] / (1.0 - alpha));
                    suffix[c] += v * wgt;
                }
                if clamped {
                    continue;
                }
                screen.d_opacity[gi] += d_alpha * ev.g;
                let d_power = d_alpha * ev.raw;
                let [a, b, c] = s.conic;
                let dm = &mut screen.d_mean2d[gi];
                dm[0] += d_power * (a * ev.dx + b * ev.dy);
                dm[1] += d_power * (b * ev.dx + c * ev.dy);
                let dc = &mut screen.d_conic[gi];
                dc[0] += -0.5 * ev.dx * ev.dx * d_power;
                dc[1] += -ev.dx * ev.dy * d_power;
                dc[2] += -0.5 * ev.dy * ev.dy * d_power;
            }
        }
    }
    Ok(d_values)
}

/// Gradients of `sum_i <grad_i, render_i>` over several renders sharing one geometry.
pub fn render_backward_multi(
    set: &GaussianSet,
    camera: &Camera,
    terms: &[(&RenderOutput, &ImageBuffer)],
) -> Result<ParamGrads> {
    let k = set.len();
    let mut screen = ScreenGrads::zeros(k);
    let mut grads = ParamGrads::zeros(k);
    let r = camera.rotation();
    for (output, grad) in terms {
        let d_values = composite_backward(set, camera, output, grad, &mut screen)?;
        match output.attribute {
            Attribute::Color => {
                for i in 0..k {
                    grads.d_colors[i] += Vec3::new(d_values[3 * i], d_values[3 * i + 1], d_values[3 * i + 2]);
                }
            }
            Attribute::Normal => {
                let dn = grads.d_normals.get_or_insert_with(|| vec![Vec3::zeros(); k]);
                for i in 0..k {
                    let d_cam = Vec3::new(d_values[3 * i], d_values[3 * i + 1], d_values[3 * i + 2]);
                    dn[i] += r.transpose() * d_cam;
                }
            }
            Attribute::Visibility => {}
        }
    }
    let prepared = terms.first().map(|(o, _)| o.prepared.clone());
    if let Some(p) = prepared {
        for i in 0..k {
            grads.d_opacities[i] = screen.d_opacity[i];
            if let Some(s) = p.splats[i].as_ref() {
                let (dc, ds) = project_backward(
                    &set.centers[i],
                    &set.scales[i],
                    &set.rotations[i],
                    camera,
                    s,
                    screen.d_mean2d[i],
                    screen.d_conic[i],
                );
                grads.d_centers[i] = dc;
                grads.d_scales[i] = ds;
            }
        }
    }
    Ok(grads)
}

/// Exact gradients of `<grad_image, render>` with respect to centers,
/// colors, scales, opacities (and normals for normal renders).
pub fn render_backward(
    set: &GaussianSet,
    camera: &Camera,
    output: &RenderOutput,
    grad_image: &ImageBuffer,
) -> Result<ParamGrads> {
    render_backward_multi(set, camera, &[(output, grad_image)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Intrinsics, Mat3};

    fn cam(size: usize) -> Camera {
        Camera::new(Intrinsics::square(size, size as f64), Mat3::identity(), Vec3::new(0.0, 0.0, 4.0)).unwrap()
    }

    #[test]
    fn empty_set_renders_background() {
        let set = GaussianSet::empty(1);
        let out = render(&set, Attribute::Color, &cam(8), &[0.1, 0.2, 0.3], &RasterConfig::default()).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.image.pixel(x, y), &[0.1, 0.2, 0.3]);
                assert_eq!(out.alpha.get(x, y, 0), 0.0);
            }
        }
    }

    #[test]
    fn huge_opaque_splat_hits_clamp() {
        let mut set = GaussianSet::empty(1);
        set.push_simple(Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), 1.0, Vec3::new(50.0, 50.0, 50.0));
        let out = render(&set, Attribute::Color, &cam(16), &[0.0; 3], &RasterConfig::default()).unwrap();
        let p = out.image.pixel(8, 8);
        assert!((p[0] - 0.99).abs() < 1e-9, "{p:?}");
        assert_eq!(&p[1..], &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_attribute_rejected() {
        let mut set = GaussianSet::empty(1);
        set.push_simple(Vec3::zeros(), Vec3::new(f64::NAN, 0.0, 0.0), 1.0, Vec3::new(0.1, 0.1, 0.1));
        let err = render(&set, Attribute::Color, &cam(8), &[0.0; 3], &RasterConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_gradient_gives_zero_grads() {
        let mut set = GaussianSet::empty(1);
        set.push_simple(Vec3::zeros(), Vec3::new(0.5, 0.2, 0.1), 0.8, Vec3::new(0.3, 0.2, 0.1));
        let c = cam(16);
        let out = render(&set, Attribute::Color, &c, &[0.0; 3], &RasterConfig::default()).unwrap();
        let g = render_backward(&set, &c, &out, &ImageBuffer::new(16, 16, 3)).unwrap();
        assert_eq!(g, ParamGrads::zeros(1));
    }

    #[test]
    fn mismatched_grad_shape_rejected() {
        let mut set = GaussianSet::empty(1);
        set.push_simple(Vec3::zeros(), Vec3::new(0.5, 0.2, 0.1), 0.8, Vec3::new(0.3, 0.2, 0.1));
        let c = cam(16);
        let out = render(&set, Attribute::Color, &c, &[0.0; 3], &RasterConfig::default()).unwrap();
        assert!(render_backward(&set, &c, &out, &ImageBuffer::new(16, 15, 3)).is_err());
    }

    #[test]
    fn isolated_splat_color_grad_is_alpha_mass() {
        let mut set = GaussianSet::empty(1);
        set.push_simple(Vec3::zeros(), Vec3::new(0.5, 0.2, 0.1), 0.7, Vec3::new(0.1, 0.1, 0.1));
        let c = cam(16);
        let out = render(&set, Attribute::Color, &c, &[0.0; 3], &RasterConfig::default()).unwrap();
        let ones = ImageBuffer::filled(16, 16, &[1.0, 0.0, 0.0]);
        let g = render_backward(&set, &c, &out, &ones).unwrap();
        let mass: f64 = out.alpha.data().iter().sum();
        assert!((g.d_colors[0].x - mass).abs() < 1e-12);
        assert_eq!(g.d_colors[0].y, 0.0);
    }
}
