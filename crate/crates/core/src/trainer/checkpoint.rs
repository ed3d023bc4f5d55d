use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{AdamState, Avatar, EvalSummary, ParamGroup, Session, TrainConfig, ViewSelection};
use crate::decoder::{Checkpoint, Decoder, DecoderConfig, DecoderParams, FeatureMap, PositionNormalization, TensorDtype};
use crate::error::{Error, Result};
use crate::raster::GaussianSet;
use crate::scene::{ImageBuffer, Intrinsics, Pose, SkinnedTemplate, Vec3, WeightMatrix};

pub const CHECKPOINT_FORMAT: &str = "avatar-session";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    stage: u8,
    epochs_stage1: usize,
    epochs_stage2: usize,
    config: TrainConfig,
    decoder: DecoderConfig,
    norm: PositionNormalization,
    intrinsics: Intrinsics,
    uv_resolution: usize,
    bake_factor: usize,
    frames: usize,
    skipped: [u64; 3],
    selection: Option<ViewSelection>,
    baseline: Option<EvalSummary>,
}

fn vec3s(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| p.iter().copied()).collect()
}

fn to_vec3s(d: &[f64]) -> Vec<Vec3> {
    d.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

fn push_group(ck: &mut Checkpoint, name: &str, g: &ParamGroup) {
    let steps: Vec<f64> = g.states.iter().map(|s| s.step as f64).collect();
    ck.push(format!("opt.{name}.steps"), vec![steps.len()], &steps);
    for (i, s) in g.states.iter().enumerate() {
        ck.push(format!("opt.{name}.{i}.m"), vec![s.m.len()], &s.m);
        ck.push(format!("opt.{name}.{i}.v"), vec![s.v.len()], &s.v);
    }
}

fn read_group(ck: &Checkpoint, name: &str, lr: f64, sizes: &[usize], skipped: u64) -> Result<ParamGroup> {
    let steps = &ck.require(&format!("opt.{name}.steps"), sizes.len())?.data;
    let mut g = ParamGroup {
        lr,
        states: Vec::with_capacity(sizes.len()),
        skipped,
    };
    for (i, &n) in sizes.iter().enumerate() {
        g.states.push(AdamState {
            m: ck.require(&format!("opt.{name}.{i}.m"), n)?.data.clone(),
            v: ck.require(&format!("opt.{name}.{i}.v"), n)?.data.clone(),
            step: steps[i] as u64,
        });
    }
    Ok(g)
}

impl Session {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let a = &self.avatar;
        let meta = Meta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            config: self.config.clone(),
            decoder: a.decoder.config,
            norm: a.norm,
            intrinsics: self.intrinsics,
            uv_resolution: a.uv_resolution,
            bake_factor: a.bake_factor,
            frames: self.pose_offsets.len(),
            skipped: [self.networks.skipped, self.features_opt.skipped, self.pose_opt.skipped],
            selection: self.selection.clone(),
            baseline: self.baseline.clone(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
        let t = &a.template;
        let (v, j) = (t.vertices.len(), t.joint_count());
        ck.push("template.vertices", vec![v, 3], &vec3s(&t.vertices));
        let faces: Vec<f64> = t.faces.iter().flatten().map(|&i| i as f64).collect();
        ck.push("template.faces", vec![t.faces.len(), 3], &faces);
        let uv: Vec<f64> = t.uv.iter().flatten().copied().collect();
        ck.push("template.uv", vec![v, 2], &uv);
        let parents: Vec<f64> = t.joint_parents.iter().map(|&p| p as f64).collect();
        ck.push("template.parents", vec![j], &parents);
        ck.push("template.rest_joints", vec![j, 3], &vec3s(&t.rest_joints));
        ck.push("template.weights", vec![v, j], t.blend_weights.data());
        let b = &a.base;
        let k = b.len();
        ck.push("base.centers", vec![k, 3], &vec3s(&b.centers));
        ck.push("base.normals", vec![k, 3], &vec3s(&b.normals));
        ck.push("base.scales", vec![k, 3], &vec3s(&b.scales));
        ck.push("base.weights", vec![k, j], b.blend_weights.data());
        let texels: Vec<f64> = b.uv_texel.iter().flatten().map(|&x| x as f64).collect();
        ck.push("base.texels", vec![k, 2], &texels);
        for (name, dims, data) in a.decoder.params.tensors() {
            ck.push(format!("decoder.{name}"), dims, data);
        }
        let f = &a.features;
        ck.push("features", vec![f.height, f.width, f.channels], &f.data);
        let vis: Vec<f64> = self.visibility.iter().map(|&x| x as u8 as f64).collect();
        ck.push("visibility", vec![k], &vis);
        let offsets: Vec<f64> = self.pose_offsets.iter().flat_map(|p| p.to_flat()).collect();
        ck.push("pose_offsets", vec![self.pose_offsets.len(), 3 * j + 3], &offsets);
        push_group(&mut ck, "networks", &self.networks);
        push_group(&mut ck, "features", &self.features_opt);
        push_group(&mut ck, "pose", &self.pose_opt);
        if let Some(c) = &self.condition {
            ck.push("condition", vec![c.height(), c.width(), c.channels()], c.data());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Session> {
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::validation(format!("checkpoint metadata: {e}")))?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!(
                "unsupported checkpoint {} v{}",
                meta.format, meta.version
            )));
        }
        let parents: Vec<i32> = ck.get("template.parents").map(|t| t.data.iter().map(|&p| p as i32).collect()).unwrap_or_default();
        let j = parents.len();
        let verts = ck.get("template.vertices").map(|t| t.data.len() / 3).unwrap_or(0);
        let nf = ck.get("template.faces").map(|t| t.data.len() / 3).unwrap_or(0);
        let template = SkinnedTemplate {
            vertices: to_vec3s(&ck.require("template.vertices", 3 * verts)?.data),
            faces: ck
                .require("template.faces", 3 * nf)?
                .data
                .chunks_exact(3)
                .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
                .collect(),
            uv: ck.require("template.uv", 2 * verts)?.data.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            joint_parents: parents,
            rest_joints: to_vec3s(&ck.require("template.rest_joints", 3 * j)?.data),
            blend_weights: WeightMatrix::from_vec(verts, j, ck.require("template.weights", verts * j)?.data.clone())?,
        };
        template.validate()?;
        let k = ck.get("base.centers").map(|t| t.data.len() / 3).unwrap_or(0);
        let mut base = GaussianSet::empty(j);
        base.centers = to_vec3s(&ck.require("base.centers", 3 * k)?.data);
        base.normals = to_vec3s(&ck.require("base.normals", 3 * k)?.data);
        base.scales = to_vec3s(&ck.require("base.scales", 3 * k)?.data);
        base.blend_weights = WeightMatrix::from_vec(k, j, ck.require("base.weights", k * j)?.data.clone())?;
        base.uv_texel = ck
            .require("base.texels", 2 * k)?
            .data
            .chunks_exact(2)
            .map(|c| [c[0] as u32, c[1] as u32])
            .collect();
        base.colors = vec![Vec3::new(0.5, 0.5, 0.5); k];
        base.opacities = vec![1.0; k];
        base.rotations = vec![[1.0, 0.0, 0.0, 0.0]; k];
        base.visibility = vec![false; k];
        meta.decoder.validate()?;
        let mut params = DecoderParams::zeros(&meta.decoder);
        let names: Vec<(String, usize)> = params.tensors().iter().map(|(n, _, d)| (n.clone(), d.len())).collect();
        for ((name, len), dst) in names.iter().zip(params.tensors_mut()) {
            dst.copy_from_slice(&ck.require(&format!("decoder.{name}"), *len)?.data);
        }
        let r = meta.uv_resolution;
        let c = meta.decoder.channels;
        let features = FeatureMap {
            width: r,
            height: r,
            channels: c,
            data: ck.require("features", r * r * c)?.data.clone(),
        };
        let avatar = Avatar {
            template,
            decoder: Decoder {
                config: meta.decoder,
                params,
            },
            features,
            norm: meta.norm,
            base,
            uv_resolution: r,
            bake_factor: meta.bake_factor,
        };
        let visibility = ck.require("visibility", k)?.data.iter().map(|&v| v != 0.0).collect();
        let n = meta.frames;
        let pose_offsets = ck
            .require("pose_offsets", n * (3 * j + 3))?
            .data
            .chunks_exact(3 * j + 3)
            .map(Pose::from_flat)
            .collect();
        let sizes: Vec<usize> = avatar.decoder.params.tensors().iter().map(|t| t.2.len()).collect();
        let cfg = &meta.config;
        let networks = read_group(ck, "networks", cfg.lr_networks, &sizes, meta.skipped[0])?;
        let features_opt = read_group(ck, "features", cfg.lr_features, &[r * r * c], meta.skipped[1])?;
        let pose_opt = read_group(ck, "pose", cfg.lr_pose, &vec![3 * j + 3; n], meta.skipped[2])?;
        let condition = match ck.get("condition") {
            Some(t) if t.dims.len() == 3 => Some(ImageBuffer::from_vec(t.dims[1], t.dims[0], t.dims[2], t.data.clone())?),
            Some(_) => return Err(Error::validation("condition tensor must be [h, w, c]")),
            None => None,
        };
        Ok(Session {
            config: meta.config,
            avatar,
            intrinsics: meta.intrinsics,
            networks,
            features_opt,
            pose_opt,
            pose_offsets,
            visibility,
            stage: meta.stage,
            epochs_stage1: meta.epochs_stage1,
            epochs_stage2: meta.epochs_stage2,
            selection: meta.selection,
            condition,
            baseline: meta.baseline,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_checkpoint()?.save(path, TensorDtype::F64)
    }

    pub fn load(path: &Path) -> Result<Session> {
        Session::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Checkpoint metadata without the tensors, e.g. for reporting.
    pub fn summary(&self) -> serde_json::Value {
        json!({
            "stage": self.stage,
            "epochs_stage1": self.epochs_stage1,
            "epochs_stage2": self.epochs_stage2,
            "gaussians": self.avatar.len(),
            "visible": self.visibility.iter().filter(|&&v| v).count(),
            "unseen_views": self.selection.as_ref().map(|s| s.unseen.len()),
        })
    }
}
