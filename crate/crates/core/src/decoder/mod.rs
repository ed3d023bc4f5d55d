//! Per-texel Gaussian decoder, pose encoder and canonical feature map.

mod checkpoint;
mod mlp;

pub use checkpoint::{Checkpoint, Tensor, TensorDtype};
pub use mlp::{hconcat, leaky, leaky_backward, Linear, LEAK};

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Vec3;
use crate::skinning::PositionalUvMap;

/// Layer widths and output ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub hidden: usize,
    /// Width of the layer fed by the input skip connection.
    pub skip_width: usize,
    pub head_width: usize,
    pub encoder_hidden: usize,
    pub max_scale: f64,
    pub offset_bound: f64,
    pub normal_offset_bound: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 32,
            hidden: 128,
            skip_width: 256,
            head_width: 64,
            encoder_hidden: 64,
            max_scale: 0.05,
            offset_bound: 0.1,
            normal_offset_bound: 0.1,
        }
    }
}

/// Index of the trunk layer whose input is `concat(h, x)`.
pub const SKIP_LAYER: usize = 3;
pub const TRUNK_LAYERS: usize = 8;
pub const HEADS: [&str; 4] = ["offset", "normal", "color", "scale"];

impl DecoderConfig {
    /// `(input, output)` of each trunk layer.
    pub fn trunk_shapes(&self) -> Vec<(usize, usize)> {
        let x = 2 * self.channels;
        let h = self.hidden;
        vec![
            (x, h),
            (h, h),
            (h, h),
            (h + x, self.skip_width),
            (self.skip_width, h),
            (h, h),
            (h, h),
            (h, self.head_width),
        ]
    }

    pub fn head_shapes(&self) -> [(usize, usize); 2] {
        [(self.head_width, self.head_width), (self.head_width, 3)]
    }

    pub fn encoder_shapes(&self) -> [(usize, usize); 2] {
        [(3, self.encoder_hidden), (self.encoder_hidden, self.channels)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 4 {
            return Err(Error::validation("decoder needs at least 4 feature channels"));
        }
        if self.hidden == 0 || self.skip_width == 0 || self.head_width == 0 || self.encoder_hidden == 0 {
            return Err(Error::validation("decoder layer widths must be positive"));
        }
        if !(self.max_scale > 0.0 && self.offset_bound > 0.0 && self.normal_offset_bound > 0.0) {
            return Err(Error::validation("decoder output bounds must be positive"));
        }
        Ok(())
    }
}

/// All learnable network weights. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub trunk: Vec<Linear>,
    /// `heads[h] = [hidden, output]` for offset, normal, color, scale.
    pub heads: Vec<[Linear; 2]>,
    pub encoder: [Linear; 2],
}

impl DecoderParams {
    pub fn zeros(config: &DecoderConfig) -> Self {
        let [h0, h1] = config.head_shapes();
        let [e0, e1] = config.encoder_shapes();
        DecoderParams {
            trunk: config.trunk_shapes().iter().map(|&(i, o)| Linear::zeros(i, o)).collect(),
            heads: (0..4).map(|_| [Linear::zeros(h0.0, h0.1), Linear::zeros(h1.0, h1.1)]).collect(),
            encoder: [Linear::zeros(e0.0, e0.1), Linear::zeros(e1.0, e1.1)],
        }
    }

    /// Kaiming-uniform layers; the final layer of every head starts at zero.
    pub fn init(config: &DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [h0, h1] = config.head_shapes();
        let [e0, e1] = config.encoder_shapes();
        let trunk = config
            .trunk_shapes()
            .iter()
            .map(|&(i, o)| Linear::kaiming(i, o, &mut rng))
            .collect();
        let heads = (0..4)
            .map(|_| [Linear::kaiming(h0.0, h0.1, &mut rng), Linear::zeros(h1.0, h1.1)])
            .collect();
        let encoder = [Linear::kaiming(e0.0, e0.1, &mut rng), Linear::kaiming(e1.0, e1.1, &mut rng)];
        DecoderParams { trunk, heads, encoder }
    }

    fn layers(&self) -> Vec<(String, &Linear)> {
        let mut out: Vec<(String, &Linear)> = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            out.push((format!("trunk.{i}"), l));
        }
        for (h, pair) in self.heads.iter().enumerate() {
            for (i, l) in pair.iter().enumerate() {
                out.push((format!("head.{}.{i}", HEADS[h]), l));
            }
        }
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}"), l));
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Linear> {
        let mut out: Vec<&mut Linear> = self.trunk.iter_mut().collect();
        for pair in self.heads.iter_mut() {
            out.extend(pair.iter_mut());
        }
        out.extend(self.encoder.iter_mut());
        out
    }

    /// `(name, values)` for every weight and bias tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        self.layers()
            .into_iter()
            .flat_map(|(name, l)| {
                [
                    (format!("{name}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().unwrap()),
                    (format!("{name}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().unwrap()),
                ]
            })
            .collect()
    }

    /// Mutable views in the order of [`DecoderParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    /// Decoder (trunk and heads) tensors only, excluding the pose encoder.
    pub fn decoder_tensor_count(&self) -> usize {
        2 * (self.trunk.len() + 2 * self.heads.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, l)| l.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|(_, l)| l.is_finite())
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// Moves the weights that read the second input half onto the first half
    /// (layer 0 and the skip layer). Outputs on `[S, S]` are unchanged and
    /// afterwards no longer depend on the second half, so `[S, P]` starts
    /// from exactly the Stage I function.
    pub fn fold_duplicate_input(&mut self, channels: usize) {
        let fold = |w: &mut Array2<f64>, start: usize| {
            let second = w.slice(s![.., start + channels..start + 2 * channels]).to_owned();
            let mut first = w.slice_mut(s![.., start..start + channels]);
            first += &second;
            w.slice_mut(s![.., start + channels..start + 2 * channels]).fill(0.0);
        };
        fold(&mut self.trunk[0].weight, 0);
        let h = self.trunk[SKIP_LAYER].input() - 2 * channels;
        fold(&mut self.trunk[SKIP_LAYER].weight, h);
    }
}

/// Independent count over the documented layer shapes.
pub fn param_count(config: &DecoderConfig) -> usize {
    let lin = |(i, o): (usize, usize)| i * o + o;
    config.trunk_shapes().into_iter().map(lin).sum::<usize>()
        + 4 * config.head_shapes().into_iter().map(lin).sum::<usize>()
        + config.encoder_shapes().into_iter().map(lin).sum::<usize>()
}

/// Texel grid of learnable features, `height x width x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn texel(&self, i: usize, j: usize) -> &[f64] {
        let o = (j * self.width + i) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn texel_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (j * self.width + i) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::shape(
                format!("{}x{}x{} features", self.width, self.height, self.channels),
                format!("{}x{}x{}", other.width, other.height, other.channels),
            ));
        }
        Ok(())
    }

    /// Rows of the listed texels, `texels.len() x channels`.
    pub fn gather(&self, texels: &[[u32; 2]]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((texels.len(), self.channels));
        for (r, &[i, j]) in texels.iter().enumerate() {
            if i as usize >= self.width || j as usize >= self.height {
                return Err(Error::Bounds(format!("texel ({i},{j}) outside {}x{}", self.width, self.height)));
            }
            for (c, v) in self.texel(i as usize, j as usize).iter().enumerate() {
                out[[r, c]] = *v;
            }
        }
        Ok(out)
    }

    /// Adds batch rows back onto their texels.
    pub fn scatter_add(&mut self, texels: &[[u32; 2]], rows: ArrayView2<f64>) {
        for (r, &[i, j]) in texels.iter().enumerate() {
            for (d, s) in self.texel_mut(i as usize, j as usize).iter_mut().zip(rows.row(r)) {
                *d += s;
            }
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Affine map taking rest positions to zero mean and unit RMS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionNormalization {
    pub mean: [f64; 3],
    pub scale: f64,
}

impl PositionNormalization {
    pub fn fit(points: impl Iterator<Item = Vec3> + Clone) -> Self {
        let n = points.clone().count().max(1) as f64;
        let mean: Vec3 = points.clone().sum::<Vec3>() / n;
        let ms = points.map(|p| (p - mean).norm_squared()).sum::<f64>() / (3.0 * n);
        PositionNormalization {
            mean: mean.into(),
            scale: if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 },
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.mean)) * self.scale
    }
}

/// Canonical features: channels 0..3 hold normalized rest positions, the
/// rest are `N(0, 0.01^2)`; invalid texels are zero.
pub fn init_canonical_features(
    rest: &PositionalUvMap,
    channels: usize,
    seed: u64,
) -> Result<(FeatureMap, PositionNormalization)> {
    if channels < 4 {
        return Err(Error::validation("feature map needs at least 4 channels"));
    }
    let norm = PositionNormalization::fit(
        rest.positions.iter().zip(&rest.valid).filter(|(_, &v)| v).map(|(p, _)| *p),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut map = FeatureMap::zeros(rest.width, rest.height, channels);
    for j in 0..rest.height {
        for i in 0..rest.width {
            let t = rest.texel(i, j);
            if !rest.valid[t] {
                continue;
            }
            let p = norm.apply(&rest.positions[t]);
            let f = map.texel_mut(i, j);
            f[..3].copy_from_slice(p.as_slice());
            for v in &mut f[3..] {
                *v = noise.sample(&mut rng);
            }
        }
    }
    Ok((map, norm))
}

/// Per-Gaussian decoder outputs, one row per decoded texel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAttributes {
    pub offsets: Vec<Vec3>,
    pub normal_offsets: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub scales: Vec<Vec3>,
}

impl GaussianAttributes {
    pub fn zeros(k: usize) -> Self {
        GaussianAttributes {
            offsets: vec![Vec3::zeros(); k],
            normal_offsets: vec![Vec3::zeros(); k],
            colors: vec![Vec3::zeros(); k],
            scales: vec![Vec3::zeros(); k],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn field(&self, h: usize) -> &Vec<Vec3> {
        match h {
            0 => &self.offsets,
            1 => &self.normal_offsets,
            2 => &self.colors,
            _ => &self.scales,
        }
    }

    fn field_mut(&mut self, h: usize) -> &mut Vec<Vec3> {
        match h {
            0 => &mut self.offsets,
            1 => &mut self.normal_offsets,
            2 => &mut self.colors,
            _ => &mut self.scales,
        }
    }
}

/// Which input pairing produced a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeInput {
    /// `[S, S]`
    Canonical,
    /// `[S, P]`
    WithPose,
}

/// Activations retained for [`Decoder::backward`].
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    input: Option<DecodeInput>,
    texels: Vec<[u32; 2]>,
    x: Array2<f64>,
    trunk_in: Vec<Array2<f64>>,
    trunk_z: Vec<Array2<f64>>,
    head_z: Vec<[Array2<f64>; 2]>,
    trunk_out: Array2<f64>,
    head_hidden: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn input(&self) -> Option<DecodeInput> {
        self.input
    }

    pub fn texels(&self) -> &[[u32; 2]] {
        &self.texels
    }
}

/// Pose-encoder activations.
#[derive(Clone, Debug, Default)]
pub struct EncoderCache {
    texels: Vec<[u32; 2]>,
    x: Array2<f64>,
    z0: Array2<f64>,
    a0: Array2<f64>,
}

/// Gradients produced by [`Decoder::backward`].
#[derive(Clone, Debug)]
pub struct DecoderGrads {
    pub params: DecoderParams,
    pub d_s: FeatureMap,
    /// Present only for `[S, P]` passes.
    pub d_p: Option<FeatureMap>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// The Gaussian decoder with its pose encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: DecoderParams,
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Decoder {
            config,
            params: DecoderParams::init(&config, seed),
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn transform(&self, h: usize, raw: f64) -> f64 {
        let c = &self.config;
        match h {
            0 => c.offset_bound * raw.tanh(),
            1 => c.normal_offset_bound * raw.tanh(),
            2 => sigmoid(raw),
            _ => c.max_scale * sigmoid(raw),
        }
    }

    /// Derivative of the output transform given the transformed value.
    fn transform_grad(&self, h: usize, out: f64) -> f64 {
        let c = &self.config;
        match h {
            0 => {
                let t = out / c.offset_bound;
                c.offset_bound * (1.0 - t * t)
            }
            1 => {
                let t = out / c.normal_offset_bound;
                c.normal_offset_bound * (1.0 - t * t)
            }
            2 => out * (1.0 - out),
            _ => {
                let t = out / c.max_scale;
                c.max_scale * t * (1.0 - t)
            }
        }
    }

    /// Runs trunk and heads on a `K x 2C` input batch.
    pub fn forward(&self, x: Array2<f64>) -> Result<(GaussianAttributes, ForwardCache)> {
        if !self.params.is_finite() {
            return Err(Error::validation("decoder parameters contain NaN or infinity"));
        }
        if x.ncols() != 2 * self.config.channels {
            return Err(Error::shape(format!("{} input features", 2 * self.config.channels), x.ncols()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("decoder input contains NaN or infinity"));
        }
        let k = x.nrows();
        let mut trunk_in = Vec::with_capacity(TRUNK_LAYERS);
        let mut trunk_z = Vec::with_capacity(TRUNK_LAYERS);
        let mut a = x.clone();
        for (l, layer) in self.params.trunk.iter().enumerate() {
            let input = if l == SKIP_LAYER { hconcat(a.view(), x.view()) } else { a };
            let z = layer.forward(input.view());
            a = leaky(&z);
            trunk_in.push(input);
            trunk_z.push(z);
        }
        let mut attrs = GaussianAttributes::zeros(k);
        let mut head_z = Vec::with_capacity(4);
        let mut head_hidden = Vec::with_capacity(4);
        for (h, [l0, l1]) in self.params.heads.iter().enumerate() {
            let z0 = l0.forward(a.view());
            let a0 = leaky(&z0);
            let z1 = l1.forward(a0.view());
            let out = attrs.field_mut(h);
            for r in 0..k {
                out[r] = Vec3::new(
                    self.transform(h, z1[[r, 0]]),
                    self.transform(h, z1[[r, 1]]),
                    self.transform(h, z1[[r, 2]]),
                );
            }
            head_hidden.push(a0);
            head_z.push([z0, z1]);
        }
        let cache = ForwardCache {
            input: None,
            texels: Vec::new(),
            x,
            trunk_in,
            trunk_z,
            head_z,
            trunk_out: a,
            head_hidden,
        };
        Ok((attrs, cache))
    }

    /// `G([S, S])` on the listed texels.
    pub fn decode_stage1(&self, s: &FeatureMap, texels: &[[u32; 2]]) -> Result<(GaussianAttributes, ForwardCache)> {
        self.check_features(s)?;
        let rows = s.gather(texels)?;
        let (attrs, mut cache) = self.forward(hconcat(rows.view(), rows.view()))?;
        cache.input = Some(DecodeInput::Canonical);
        cache.texels = texels.to_vec();
        Ok((attrs, cache))
    }

    /// `G([S, P])` on the listed texels.
    pub fn decode_stage2(
        &self,
        s: &FeatureMap,
        p: &FeatureMap,
        texels: &[[u32; 2]],
    ) -> Result<(GaussianAttributes, ForwardCache)> {
        self.check_features(s)?;
        s.same_shape(p)?;
        let (a, b) = (s.gather(texels)?, p.gather(texels)?);
        let (attrs, mut cache) = self.forward(hconcat(a.view(), b.view()))?;
        cache.input = Some(DecodeInput::WithPose);
        cache.texels = texels.to_vec();
        Ok((attrs, cache))
    }

    fn check_features(&self, s: &FeatureMap) -> Result<()> {
        if s.channels != self.config.channels {
            return Err(Error::shape(format!("{} feature channels", self.config.channels), s.channels));
        }
        if !s.is_finite() {
            return Err(Error::validation("feature map contains NaN or infinity"));
        }
        Ok(())
    }

    /// Reverse pass of one forward call. Parameter gradients are accumulated
    /// into `grads`; the returned matrix is `dL/dx` for the `K x 2C` input.
    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        outputs: &GaussianAttributes,
        upstream: &GaussianAttributes,
        grads: &mut DecoderParams,
    ) -> Result<Array2<f64>> {
        if cache.trunk_z.len() != TRUNK_LAYERS {
            return Err(Error::State("decoder backward called without a forward cache".into()));
        }
        let k = cache.x.nrows();
        if upstream.len() != k || outputs.len() != k {
            return Err(Error::shape(format!("{k} attribute gradients"), upstream.len()));
        }
        let mut d_trunk_out = Array2::<f64>::zeros(cache.trunk_out.raw_dim());
        for h in 0..4 {
            let [l0, l1] = &self.params.heads[h];
            let [g0, g1] = &mut grads.heads[h];
            let (out, up) = (outputs.field(h), upstream.field(h));
            let mut dz1 = Array2::<f64>::zeros((k, 3));
            for r in 0..k {
                for c in 0..3 {
                    dz1[[r, c]] = up[r][c] * self.transform_grad(h, out[r][c]);
                }
            }
            let da0 = l1.backward(cache.head_hidden[h].view(), &dz1, g1);
            let dz0 = leaky_backward(&cache.head_z[h][0], &da0);
            d_trunk_out += &l0.backward(cache.trunk_out.view(), &dz0, g0);
        }
        let c2 = 2 * self.config.channels;
        let mut dx = Array2::<f64>::zeros((k, c2));
        let mut da = d_trunk_out;
        for l in (0..TRUNK_LAYERS).rev() {
            let dz = leaky_backward(&cache.trunk_z[l], &da);
            let d_in = self.params.trunk[l].backward(cache.trunk_in[l].view(), &dz, &mut grads.trunk[l]);
            if l == SKIP_LAYER {
                let h = d_in.ncols() - c2;
                dx += &d_in.slice(s![.., h..]);
                da = d_in.slice(s![.., ..h]).to_owned();
            } else {
                da = d_in;
            }
        }
        dx += &da;
        Ok(dx)
    }

    /// Gradients with respect to the parameters, `S` and (for `[S, P]`) `P`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        outputs: &GaussianAttributes,
        upstream: &GaussianAttributes,
        s_shape: &FeatureMap,
    ) -> Result<DecoderGrads> {
        let input = cache
            .input
            .ok_or_else(|| Error::State("forward cache does not come from a decode call".into()))?;
        let mut params = DecoderParams::zeros(&self.config);
        let dx = self.backward_input(cache, outputs, upstream, &mut params)?;
        let c = self.config.channels;
        let mut d_s = FeatureMap::zeros(s_shape.width, s_shape.height, c);
        d_s.scatter_add(&cache.texels, dx.slice(s![.., ..c]));
        let d_p = match input {
            DecodeInput::Canonical => {
                d_s.scatter_add(&cache.texels, dx.slice(s![.., c..]));
                None
            }
            DecodeInput::WithPose => {
                let mut d_p = FeatureMap::zeros(s_shape.width, s_shape.height, c);
                d_p.scatter_add(&cache.texels, dx.slice(s![.., c..]));
                Some(d_p)
            }
        };
        Ok(DecoderGrads { params, d_s, d_p })
    }

    /// `P = Encoder(P_uv)` on the listed texels of a positional map (positions
    /// normalized by `norm`); all other texels of `P` are zero.
    pub fn encode_pose(
        &self,
        p_uv: &PositionalUvMap,
        norm: &PositionNormalization,
        texels: &[[u32; 2]],
        shape: &FeatureMap,
    ) -> Result<(FeatureMap, EncoderCache)> {
        if (p_uv.width, p_uv.height) != (shape.width, shape.height) {
            return Err(Error::validation(format!(
                "pose map is {}x{}, decoder resolution is {}x{}",
                p_uv.width, p_uv.height, shape.width, shape.height
            )));
        }
        let mut x = Array2::zeros((texels.len(), 3));
        for (r, &[i, j]) in texels.iter().enumerate() {
            let t = p_uv.texel(i as usize, j as usize);
            let p = norm.apply(&p_uv.positions[t]);
            for c in 0..3 {
                x[[r, c]] = p[c];
            }
        }
        let [e0, e1] = &self.params.encoder;
        let z0 = e0.forward(x.view());
        let a0 = leaky(&z0);
        let out = leaky(&e1.forward(a0.view()));
        let mut p = FeatureMap::zeros(shape.width, shape.height, self.config.channels);
        p.scatter_add(texels, out.view());
        Ok((
            p,
            EncoderCache {
                texels: texels.to_vec(),
                x,
                z0,
                a0,
            },
        ))
    }

    /// Accumulates encoder parameter gradients from `dL/dP`.
    pub fn encoder_backward(&self, cache: &EncoderCache, d_p: &FeatureMap, grads: &mut DecoderParams) -> Result<()> {
        if cache.x.nrows() != cache.texels.len() || cache.z0.nrows() != cache.texels.len() {
            return Err(Error::State("encoder backward called without a forward cache".into()));
        }
        let d_out = d_p.gather(&cache.texels)?;
        let [e0, e1] = &self.params.encoder;
        let z1 = e1.forward(cache.a0.view());
        let dz1 = leaky_backward(&z1, &d_out);
        let [g0, g1] = &mut grads.encoder;
        let da0 = e1.backward(cache.a0.view(), &dz1, g1);
        let dz0 = leaky_backward(&cache.z0, &da0);
        e0.backward(cache.x.view(), &dz0, g0);
        Ok(())
    }
}
