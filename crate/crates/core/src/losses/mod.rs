//! Scalar objectives and image metrics with analytic gradients.

mod metrics;

pub use metrics::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rgb: f64,
    pub normal: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub offset: f64,
    pub scale: f64,
    pub features: f64,
    pub pose_features: f64,
    pub sds: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rgb: 0.8,
            normal: 0.8,
            ssim: 0.2,
            lpips: 0.2,
            offset: 0.85,
            scale: 0.03,
            features: 1.0,
            pose_features: 0.5,
            sds: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("rgb", self.rgb),
            ("normal", self.normal),
            ("ssim", self.ssim),
            ("lpips", self.lpips),
            ("offset", self.offset),
            ("scale", self.scale),
            ("features", self.features),
            ("pose_features", self.pose_features),
            ("sds", self.sds),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub value: f64,
    pub weight: f64,
}

/// Named loss terms and their weighted total.
///
/// `absent` lists terms that could not be evaluated (skipped perceptual
/// provider, missing normals). `diagnostics` carries quantities that are
/// reported but never summed, such as SDS gradient norms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
    pub absent: Vec<String>,
    pub diagnostics: Vec<(String, f64)>,
}

impl LossReport {
    fn push(&mut self, name: &str, value: f64, weight: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::validation(format!("loss term {name} is not finite")));
        }
        self.terms.push(LossTerm {
            name: name.to_string(),
            value,
            weight,
        });
        self.total += weight * value;
        Ok(())
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    pub fn diagnostic(&self, name: &str) -> Option<f64> {
        self.diagnostics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn recompose(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.value).sum()
    }
}

pub struct Stage1Inputs<'a> {
    pub rgb: &'a ImageBuffer,
    pub rgb_gt: &'a ImageBuffer,
    /// Rendered and target normal maps; `None` disables the normal term.
    pub normals: Option<(&'a ImageBuffer, &'a ImageBuffer)>,
    pub mask: &'a ImageBuffer,
    pub features: &'a [f64],
    pub offsets: &'a [f64],
    pub scales: &'a [f64],
}

#[derive(Clone, Debug)]
pub struct Stage1Grads {
    pub d_rgb: ImageBuffer,
    pub d_normals: Option<ImageBuffer>,
    pub d_features: Vec<f64>,
    pub d_offsets: Vec<f64>,
    pub d_scales: Vec<f64>,
}

fn scaled(mut v: Vec<f64>, s: f64) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x *= s);
    v
}

/// Weighted reconstruction plus regularisation objective for the first stage.
pub fn stage1_loss(
    inputs: &Stage1Inputs,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<(LossReport, Stage1Grads)> {
    let mut report = LossReport::default();
    let (l_rgb, g_rgb) = mse_grad(inputs.rgb, inputs.rgb_gt, None)?;
    report.push("rgb", l_rgb, weights.rgb)?;
    let mut d_rgb = g_rgb;
    d_rgb.data_mut().iter_mut().for_each(|x| *x *= weights.rgb);

    let d_normals = match inputs.normals {
        Some((n, n_gt)) => {
            let (l, mut g) = normal_loss_grad(n, n_gt, inputs.mask)?;
            report.push("normal", l, weights.normal)?;
            g.data_mut().iter_mut().for_each(|x| *x *= weights.normal);
            Some(g)
        }
        None => {
            report.absent.push("normal".into());
            None
        }
    };

    if weights.ssim > 0.0 {
        let (s, g) = ssim_grad(inputs.rgb, inputs.rgb_gt)?;
        report.push("ssim", 1.0 - s, weights.ssim)?;
        d_rgb.add_scaled(&g, -weights.ssim);
    }

    match perceptual {
        Some(p) if weights.lpips > 0.0 => match p.distance_grad(inputs.rgb, inputs.rgb_gt) {
            Ok((v, g)) => {
                report.push("lpips", v, weights.lpips)?;
                if let Some(g) = g {
                    d_rgb.add_scaled(&g, weights.lpips);
                }
            }
            Err(e) => {
                log::warn!("perceptual metric {} failed, term skipped: {e}", p.name());
                report.absent.push("lpips".into());
            }
        },
        _ => report.absent.push("lpips".into()),
    }

    let (f_dx, g_dx) = frobenius_grad(inputs.offsets);
    report.push("offset_frobenius", f_dx, weights.offset)?;
    let (f_s, g_s) = frobenius_grad(inputs.scales);
    report.push("scale_frobenius", f_s, weights.scale)?;
    let (f_f, g_f) = frobenius_grad(inputs.features);
    report.push("feature_frobenius", f_f, weights.features)?;

    let grads = Stage1Grads {
        d_rgb,
        d_normals,
        d_features: scaled(g_f, weights.features),
        d_offsets: scaled(g_dx, weights.offset),
        d_scales: scaled(g_s, weights.scale),
    };
    Ok((report, grads))
}

/// Second-stage objective: the first-stage loss plus the pose-feature
/// regulariser. SDS enters as image-space gradients computed elsewhere; their
/// norms are recorded as diagnostics together with `lambda_sds`.
pub fn stage2_loss(
    inputs: &Stage1Inputs,
    pose_features: &[f64],
    sds_observation: Option<f64>,
    sds_canonical: Option<f64>,
    lambda_sds: f64,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<(LossReport, Stage1Grads, Vec<f64>)> {
    let (mut report, grads) = stage1_loss(inputs, weights, perceptual)?;
    let (f_p, g_p) = frobenius_grad(pose_features);
    report.push("pose_feature_frobenius", f_p, weights.pose_features)?;
    report.diagnostics.push(("lambda_sds".into(), lambda_sds));
    for (name, v) in [("sds_observation_grad_norm", sds_observation), ("sds_canonical_grad_norm", sds_canonical)] {
        if let Some(v) = v {
            report.diagnostics.push((name.into(), v));
        }
    }
    Ok((report, grads, scaled(g_p, weights.pose_features)))
}
