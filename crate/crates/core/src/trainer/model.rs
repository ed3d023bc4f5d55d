use crate::decoder::{
    init_canonical_features, Decoder, DecoderConfig, DecoderParams, EncoderCache, FeatureMap, ForwardCache,
    GaussianAttributes, PositionNormalization,
};
use crate::error::{Error, Result};
use crate::raster::{composite, prepare, Attribute, GaussianSet, ParamGrads, RasterConfig, RenderOutput};
use crate::scene::{Camera, ImageBuffer, Pose, SkinnedTemplate, Vec3};
use crate::skinning::{
    bake_positional_uv, fk_backward, forward_kinematics, init_gaussians_from_uv, lbs_backward, pose_gaussians,
    posed_map, rasterize_uv, JointTransforms, PositionalUvMap, UvCoverage,
};

/// Decoder, canonical features and the rest-pose Gaussian layout they drive.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub template: SkinnedTemplate,
    pub decoder: Decoder,
    pub features: FeatureMap,
    pub norm: PositionNormalization,
    /// Rest centres, normals, blend weights and texels; other fields unused.
    pub base: GaussianSet,
    pub uv_resolution: usize,
    pub bake_factor: usize,
}

/// Everything retained from one decode for the backward pass.
pub struct Decoded {
    pub attrs: GaussianAttributes,
    pub cache: ForwardCache,
    pub encoder: Option<(EncoderCache, FeatureMap)>,
    /// Canonical Gaussians, decoder outputs applied.
    pub canonical: GaussianSet,
    /// `n_hat + dn` before normalization.
    pub raw_normals: Vec<Vec3>,
}

/// Gradients of one iteration on every trainable quantity.
pub struct AvatarGrads {
    pub params: DecoderParams,
    pub d_features: FeatureMap,
    pub d_pose: Option<Pose>,
}

/// Extra loss gradients that do not come through the renderer.
#[derive(Default)]
pub struct DirectGrads<'a> {
    pub d_offsets: Option<&'a [f64]>,
    pub d_scales: Option<&'a [f64]>,
    pub d_features: Option<&'a [f64]>,
    pub d_pose_features: Option<&'a [f64]>,
}

pub struct Rendered {
    pub set: GaussianSet,
    pub transforms: Option<JointTransforms>,
    pub color: RenderOutput,
    pub normal: Option<RenderOutput>,
}

/// Rest-pose positional map antialiased from a `factor`-times finer bake.
pub fn bake_rest(template: &SkinnedTemplate, resolution: usize, factor: usize) -> Result<PositionalUvMap> {
    bake_positional_uv(template, resolution * factor)?.downsample(factor)
}

impl Avatar {
    pub fn new(template: SkinnedTemplate, uv_resolution: usize, bake_factor: usize, decoder: DecoderConfig, seed: u64) -> Result<Self> {
        template.validate()?;
        if uv_resolution < 4 || bake_factor == 0 {
            return Err(Error::validation(format!(
                "uv resolution {uv_resolution} and bake factor {bake_factor} are invalid"
            )));
        }
        let rest = bake_rest(&template, uv_resolution, bake_factor)?;
        let base = init_gaussians_from_uv(&rest)?;
        let (features, norm) = init_canonical_features(&rest, decoder.channels, seed ^ 0x5eed_f00d)?;
        Ok(Avatar {
            template,
            decoder: Decoder::new(decoder, seed)?,
            features,
            norm,
            base,
            uv_resolution,
            bake_factor,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn texels(&self) -> &[[u32; 2]] {
        &self.base.uv_texel
    }

    pub fn coverage(&self) -> Result<UvCoverage> {
        let r = self.uv_resolution * self.bake_factor;
        rasterize_uv(&self.template, r, r)
    }

    /// Posed positional map at the decoder resolution.
    pub fn pose_map(&self, coverage: &UvCoverage, pose: &Pose) -> Result<PositionalUvMap> {
        posed_map(&self.template, coverage, pose)?.downsample(self.bake_factor)
    }

    /// `G([S, S])`, or `G([S, P])` with `P = Encoder(pose_map)` when a map is given.
    pub fn decode(&self, pose_map: Option<&PositionalUvMap>) -> Result<Decoded> {
        let texels = self.texels();
        let (attrs, cache, encoder) = match pose_map {
            None => {
                let (a, c) = self.decoder.decode_stage1(&self.features, texels)?;
                (a, c, None)
            }
            Some(map) => {
                let (p, enc) = self.decoder.encode_pose(map, &self.norm, texels, &self.features)?;
                let (a, c) = self.decoder.decode_stage2(&self.features, &p, texels)?;
                (a, c, Some((enc, p)))
            }
        };
        let mut canonical = self.base.clone();
        let mut raw_normals = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            canonical.centers[i] = self.base.centers[i] + attrs.offsets[i];
            let m = self.base.normals[i] + attrs.normal_offsets[i];
            raw_normals.push(m);
            canonical.normals[i] = if m.norm() > 1e-12 { m.normalize() } else { self.base.normals[i] };
            canonical.colors[i] = attrs.colors[i];
            canonical.scales[i] = attrs.scales[i];
        }
        Ok(Decoded {
            attrs,
            cache,
            encoder,
            canonical,
            raw_normals,
        })
    }

    /// Renders the decoded avatar skinned to `pose` (or in canonical space).
    pub fn render(
        &self,
        dec: &Decoded,
        pose: Option<&Pose>,
        camera: &Camera,
        background: &[f64],
        normals: bool,
        raster: &RasterConfig,
    ) -> Result<Rendered> {
        let (set, transforms) = match pose {
            Some(p) => {
                let t = forward_kinematics(&self.template, p)?;
                (pose_gaussians(&dec.canonical, &t)?, Some(t))
            }
            None => (dec.canonical.clone(), None),
        };
        let prepared = prepare(&set, camera, raster)?;
        let color = composite(&prepared, &set, Attribute::Color, camera, background)?;
        let normal = if normals {
            Some(composite(&prepared, &set, Attribute::Normal, camera, &[0.0, 0.0, 0.0])?)
        } else {
            None
        };
        Ok(Rendered {
            set,
            transforms,
            color,
            normal,
        })
    }

    /// Pulls renderer gradients (on the rendered set) and direct loss
    /// gradients back to decoder parameters, features and the pose.
    pub fn backward(&self, dec: &Decoded, rendered: &Rendered, pg: &ParamGrads, direct: &DirectGrads) -> Result<AvatarGrads> {
        let k = self.len();
        let zeros = vec![Vec3::zeros(); k];
        let d_normals_posed = pg.d_normals.as_deref();
        let (d_centers, d_normals, d_pose) = match &rendered.transforms {
            Some(t) => {
                let lbs = lbs_backward(
                    &dec.canonical.centers,
                    &dec.canonical.normals,
                    t,
                    &dec.canonical.blend_weights,
                    &pg.d_centers,
                    d_normals_posed.unwrap_or(&[]),
                )?;
                let d_pose = fk_backward(t, &lbs.d_matrices);
                let dn = if d_normals_posed.is_some() { lbs.d_normals } else { zeros.clone() };
                (lbs.d_points, dn, Some(d_pose))
            }
            None => (pg.d_centers.clone(), d_normals_posed.map(|d| d.to_vec()).unwrap_or(zeros.clone()), None),
        };
        let mut up = GaussianAttributes::zeros(k);
        for i in 0..k {
            let mut dx = d_centers[i];
            let mut ds = pg.d_scales[i];
            if let Some(g) = direct.d_offsets {
                dx += Vec3::new(g[3 * i], g[3 * i + 1], g[3 * i + 2]);
            }
            if let Some(g) = direct.d_scales {
                ds += Vec3::new(g[3 * i], g[3 * i + 1], g[3 * i + 2]);
            }
            up.offsets[i] = dx;
            up.scales[i] = ds;
            up.colors[i] = pg.d_colors[i];
            let m = dec.raw_normals[i];
            let len = m.norm();
            if len > 1e-12 {
                let n = m / len;
                let g = d_normals[i];
                up.normal_offsets[i] = (g - n * n.dot(&g)) / len;
            }
        }
        let mut grads = self.decoder.backward(&dec.cache, &dec.attrs, &up, &self.features)?;
        if let Some(g) = direct.d_features {
            grads.d_s.data.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if let (Some((enc, _)), Some(mut d_p)) = (&dec.encoder, grads.d_p.take()) {
            if let Some(g) = direct.d_pose_features {
                d_p.data.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            self.decoder.encoder_backward(enc, &d_p, &mut grads.params)?;
        }
        Ok(AvatarGrads {
            params: grads.params,
            d_features: grads.d_s,
            d_pose,
        })
    }

    /// Colour render of the decoded avatar; convenience for evaluation.
    pub fn render_color(&self, dec: &Decoded, pose: Option<&Pose>, camera: &Camera, background: &[f64], raster: &RasterConfig) -> Result<ImageBuffer> {
        Ok(self.render(dec, pose, camera, background, false, raster)?.color.image)
    }
}
