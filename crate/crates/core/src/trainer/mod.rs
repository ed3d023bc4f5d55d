//! Two-stage optimization: reconstruction of the observed frames, then
//! score distillation into views the video never covered.

mod adam;
mod checkpoint;
mod model;
mod schedule;
mod views;

pub use adam::*;
pub use checkpoint::*;
pub use model::*;
pub use schedule::*;
pub use views::*;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{binarize, Dataset, TargetSource, BACKGROUND};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::guidance::{
    prepare_guidance_image, sds_gradient, CropWindow, DeltaCamera, DiffusionSchedule, NoiseProvider, ScheduleConfig,
    SdsInputs,
};
use crate::losses::{psnr, ssim, stage1_loss, stage2_loss, LossReport, LossWeights, PerceptualMetric, PyramidL2, Stage1Inputs};
use crate::raster::{mark_visibility_supersampled, render_backward_multi, RasterConfig};
use crate::scene::{Camera, ImageBuffer, Intrinsics, Pose, Vec3};
use crate::skinning::{forward_kinematics, pose_gaussians, PositionalUvMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perceptual {
    #[default]
    PyramidL2,
    None,
}

/// Early stop for Stage II once both conditions hold against the Stage I baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Target {
    pub unseen_gain_db: f64,
    pub seen_drop_db: f64,
}

impl Default for Stage2Target {
    fn default() -> Self {
        Stage2Target {
            unseen_gain_db: 5.0,
            seen_drop_db: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub ratio_dual: f64,
    pub ratio_canonical: f64,
    pub visibility_threshold: f64,
    /// Rays per pixel along each axis when marking visible Gaussians.
    pub visibility_supersample: usize,
    pub azimuth_samples: usize,
    pub overhead_elevation_deg: f64,
    pub view_radius: f64,
    pub weights: LossWeights,
    pub sds_t0: usize,
    pub sds_k: usize,
    pub lr_features: f64,
    pub lr_networks: f64,
    pub lr_pose: f64,
    pub seed: u64,
    /// Side of the UV feature map (one Gaussian per valid texel).
    pub uv_resolution: usize,
    /// The template is baked this many times finer, then box-filtered down.
    pub bake_factor: usize,
    pub pose_refinement: bool,
    /// Defaults to the frame count.
    pub iterations_per_epoch: Option<usize>,
    pub perceptual: Perceptual,
    /// Stop Stage I once the seen-view PSNR reaches this value.
    pub stage1_target_psnr: Option<f64>,
    pub stage2_target: Option<Stage2Target>,
    /// Evaluate every this many epochs (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Evaluate on every `eval_stride`-th frame.
    pub eval_stride: usize,
    pub decoder: DecoderConfig,
    pub guidance: ScheduleConfig,
    pub adam: AdamConfig,
    pub exact_raster: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 200,
            epochs_stage2: 400,
            ratio_dual: 0.5,
            ratio_canonical: 0.5,
            visibility_threshold: 0.5,
            visibility_supersample: 2,
            azimuth_samples: 100,
            overhead_elevation_deg: 60.0,
            view_radius: 5.0,
            weights: LossWeights::default(),
            sds_t0: 100,
            sds_k: 100,
            lr_features: 1e-3,
            lr_networks: 5e-4,
            lr_pose: 1e-4,
            seed: 0,
            uv_resolution: 128,
            bake_factor: 4,
            pose_refinement: false,
            iterations_per_epoch: None,
            perceptual: Perceptual::PyramidL2,
            stage1_target_psnr: None,
            stage2_target: None,
            eval_every: 1,
            eval_stride: 6,
            decoder: DecoderConfig::default(),
            guidance: ScheduleConfig::default(),
            adam: AdamConfig::default(),
            exact_raster: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("ratio_dual", self.ratio_dual), ("ratio_canonical", self.ratio_canonical)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::validation(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.visibility_threshold > 0.0 && self.visibility_threshold < 1.0) {
            return Err(Error::validation("visibility_threshold must lie in (0, 1)"));
        }
        if self.sds_k == 0 || self.eval_stride == 0 || self.iterations_per_epoch == Some(0) || self.visibility_supersample == 0 {
            return Err(Error::validation(
                "sds_k, eval_stride, iterations_per_epoch and visibility_supersample must be >= 1",
            ));
        }
        for (name, lr) in [
            ("lr_features", self.lr_features),
            ("lr_networks", self.lr_networks),
            ("lr_pose", self.lr_pose),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::validation(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.view_radius > 0.0) {
            return Err(Error::validation("view_radius must be positive"));
        }
        self.weights.validate()?;
        self.decoder.validate()?;
        DiffusionSchedule::new(self.guidance.clone())?;
        Ok(())
    }

    pub fn raster(&self) -> RasterConfig {
        if self.exact_raster {
            RasterConfig::exact()
        } else {
            RasterConfig::default()
        }
    }

    fn metric(&self) -> Option<&'static dyn PerceptualMetric> {
        match self.perceptual {
            Perceptual::PyramidL2 => Some(&PyramidL2),
            Perceptual::None => None,
        }
    }
}

/// Spherical coordinates of a camera centre about the origin: `(azimuth, elevation, radius)` in degrees.
pub fn spherical(camera: &Camera) -> (f64, f64, f64) {
    let c = camera.center();
    let r = c.norm();
    let el = (c.y / r).clamp(-1.0, 1.0).asin().to_degrees();
    let az = c.x.atan2(-c.z).to_degrees();
    (az, el, r)
}

fn wrap_degrees(a: f64) -> f64 {
    let w = (a + 180.0).rem_euclid(360.0) - 180.0;
    if w == -180.0 {
        180.0
    } else {
        w
    }
}

fn epoch_seed(seed: u64, stage: u8, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((stage as u64) << 56) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub frame: usize,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub seen_psnr: f64,
    pub seen_ssim: f64,
    pub unseen_psnr: Option<f64>,
    pub unseen_ssim: Option<f64>,
    pub seen: Vec<ViewScore>,
    pub unseen: Vec<ViewScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub given: usize,
    pub canonical_sds: usize,
    pub observation_sds: usize,
}

/// One line of the JSONL metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub planned: IterationCounts,
    pub executed: IterationCounts,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub lambda_sds: f64,
    pub sds_skipped: usize,
    pub sds_grad_norm: f64,
    pub seen_psnr: Option<f64>,
    pub unseen_psnr: Option<f64>,
    pub elapsed_s: f64,
}

/// JSONL writer for [`EpochRecord`]s.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn disabled() -> Self {
        MetricsLog { out: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some(w) = &mut self.out {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    }
}

/// Runtime caches for Stage II, rebuilt from the template on demand.
pub struct PoseMaps {
    pub rest: PositionalUvMap,
    pub frames: Vec<PositionalUvMap>,
}

/// Trainable state, optimizer moments and bookkeeping of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub config: TrainConfig,
    pub avatar: Avatar,
    pub intrinsics: Intrinsics,
    pub networks: ParamGroup,
    pub features_opt: ParamGroup,
    pub pose_opt: ParamGroup,
    pub pose_offsets: Vec<Pose>,
    /// Visibility flag per Gaussian.
    pub visibility: Vec<bool>,
    pub stage: u8,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub selection: Option<ViewSelection>,
    /// Frozen canonical condition image in `[-1, 1]`.
    pub condition: Option<ImageBuffer>,
    pub baseline: Option<EvalSummary>,
}

struct StepOutcome {
    report: Option<LossReport>,
    sds_norm: f64,
    sds_skipped: bool,
}

impl Session {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        dataset.validate()?;
        let j = dataset.template.joint_count();
        for (i, f) in dataset.frames.iter().enumerate() {
            if f.pose.joint_count() != j {
                return Err(Error::validation(format!(
                    "frame {i} pose has {} joints, template has {j}",
                    f.pose.joint_count()
                )));
            }
        }
        let avatar = Avatar::new(
            dataset.template.clone(),
            config.uv_resolution,
            config.bake_factor,
            config.decoder,
            config.seed,
        )?;
        let sizes: Vec<usize> = avatar.decoder.params.tensors().iter().map(|t| t.2.len()).collect();
        let n = dataset.len();
        let k = avatar.len();
        let fsize = avatar.features.data.len();
        Ok(Session {
            config: config.clone(),
            intrinsics: dataset.frames[0].camera.intrinsics,
            networks: ParamGroup::new(config.lr_networks, &sizes),
            features_opt: ParamGroup::new(config.lr_features, &[fsize]),
            pose_opt: ParamGroup::new(config.lr_pose, &vec![3 * j + 3; n]),
            pose_offsets: vec![Pose::identity(j); n],
            visibility: vec![false; k],
            avatar,
            stage: 1,
            epochs_stage1: 0,
            epochs_stage2: 0,
            selection: None,
            condition: None,
            baseline: None,
        })
    }

    pub fn raster(&self) -> RasterConfig {
        self.config.raster()
    }

    /// The dataset must carry this session's template and frame count.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        ds.validate()?;
        if ds.template != self.avatar.template {
            return Err(Error::validation("dataset template differs from the session template"));
        }
        if ds.len() != self.pose_offsets.len() {
            return Err(Error::validation(format!(
                "dataset has {} frames, session was built for {}",
                ds.len(),
                self.pose_offsets.len()
            )));
        }
        Ok(())
    }

    pub fn frame_pose(&self, ds: &Dataset, f: usize) -> Pose {
        if self.config.pose_refinement {
            ds.frames[f].pose.offset_by(&self.pose_offsets[f])
        } else {
            ds.frames[f].pose.clone()
        }
    }

    pub fn pose_maps(&self, ds: &Dataset) -> Result<PoseMaps> {
        let cov = self.avatar.coverage()?;
        let rest = self.avatar.pose_map(&cov, &Pose::identity(self.avatar.template.joint_count()))?;
        let frames = (0..ds.len())
            .map(|f| self.avatar.pose_map(&cov, &self.frame_pose(ds, f)))
            .collect::<Result<Vec<_>>>()?;
        Ok(PoseMaps { rest, frames })
    }

    fn apply(&mut self, grads: &AvatarGrads, pose_frame: Option<usize>) -> Result<()> {
        let cfg = self.config.adam;
        let active = if self.stage == 1 {
            self.avatar.decoder.params.decoder_tensor_count()
        } else {
            self.networks.states.len()
        };
        let g = grads.params.tensors();
        let lr = self.networks.lr;
        for (i, p) in self.avatar.decoder.params.tensors_mut().into_iter().enumerate().take(active) {
            if !adam_step(p, g[i].2, &mut self.networks.states[i], lr, &cfg)? {
                self.networks.skipped += 1;
                log::warn!("non-finite gradient on {}, update skipped", g[i].0);
            }
        }
        let lr = self.features_opt.lr;
        if !adam_step(&mut self.avatar.features.data, &grads.d_features.data, &mut self.features_opt.states[0], lr, &cfg)? {
            self.features_opt.skipped += 1;
            log::warn!("non-finite feature gradient, update skipped");
        }
        if let (Some(f), Some(dp), true) = (pose_frame, &grads.d_pose, self.config.pose_refinement) {
            let mut flat = self.pose_offsets[f].to_flat();
            let lr = self.pose_opt.lr;
            if adam_step(&mut flat, &dp.to_flat(), &mut self.pose_opt.states[f], lr, &cfg)? {
                self.pose_offsets[f] = Pose::from_flat(&flat);
            } else {
                self.pose_opt.skipped += 1;
            }
        }
        Ok(())
    }

    /// One reconstruction step on frame `f`.
    fn given_step(&mut self, ds: &Dataset, f: usize, maps: Option<&PoseMaps>, lambda_sds: f64) -> Result<LossReport> {
        let (report, grads) = self.given_grads(ds, f, maps, lambda_sds)?;
        self.apply(&grads, Some(f))?;
        Ok(report)
    }

    /// Loss and gradients of the reconstruction objective on frame `f`.
    pub fn given_grads(&self, ds: &Dataset, f: usize, maps: Option<&PoseMaps>, lambda_sds: f64) -> Result<(LossReport, AvatarGrads)> {
        let frame = &ds.frames[f];
        let pose = self.frame_pose(ds, f);
        let dec = self.avatar.decode(maps.map(|m| &m.frames[f]))?;
        let w = &self.config.weights;
        let use_normals = frame.normal.is_some() && w.normal > 0.0;
        let raster = self.raster();
        let r = self.avatar.render(&dec, Some(&pose), &frame.camera, &BACKGROUND, use_normals, &raster)?;
        let gt = frame.rgb.masked(&frame.mask, &BACKGROUND)?;
        let offsets: Vec<f64> = dec.attrs.offsets.iter().flat_map(|v| v.iter().copied()).collect();
        let scales: Vec<f64> = dec.attrs.scales.iter().flat_map(|v| v.iter().copied()).collect();
        let inputs = Stage1Inputs {
            rgb: &r.color.image,
            rgb_gt: &gt,
            normals: match (&r.normal, &frame.normal) {
                (Some(n), Some(n_gt)) => Some((&n.image, n_gt)),
                _ => None,
            },
            mask: &frame.mask,
            features: &self.avatar.features.data,
            offsets: &offsets,
            scales: &scales,
        };
        let metric = self.config.metric();
        let (report, grads, d_pf) = match &dec.encoder {
            None => {
                let (rep, g) = stage1_loss(&inputs, w, metric)?;
                (rep, g, None)
            }
            Some((_, p)) => {
                let (rep, g, dp) = stage2_loss(&inputs, &p.data, None, None, lambda_sds, w, metric)?;
                (rep, g, Some(dp))
            }
        };
        let mut terms = vec![(&r.color, &grads.d_rgb)];
        if let (Some(n), Some(dn)) = (&r.normal, &grads.d_normals) {
            terms.push((n, dn));
        }
        let pg = render_backward_multi(&r.set, &frame.camera, &terms)?;
        let direct = DirectGrads {
            d_offsets: Some(&grads.d_offsets),
            d_scales: Some(&grads.d_scales),
            d_features: Some(&grads.d_features),
            d_pose_features: d_pf.as_deref(),
        };
        let ag = self.avatar.backward(&dec, &r, &pg, &direct)?;
        Ok((report, ag))
    }

    /// Updates only frame `f`'s pose offset, keeping the model fixed.
    pub fn refine_pose_step(&mut self, ds: &Dataset, f: usize) -> Result<LossReport> {
        if !self.config.pose_refinement {
            return Err(Error::State("pose refinement is disabled".into()));
        }
        let (report, grads) = self.given_grads(ds, f, None, 0.0)?;
        let dp = grads.d_pose.expect("posed render yields a pose gradient");
        let mut flat = self.pose_offsets[f].to_flat();
        let lr = self.pose_opt.lr;
        if adam_step(&mut flat, &dp.to_flat(), &mut self.pose_opt.states[f], lr, &self.config.adam)? {
            self.pose_offsets[f] = Pose::from_flat(&flat);
        } else {
            self.pose_opt.skipped += 1;
        }
        Ok(report)
    }

    /// One score-distillation step from a random unseen camera.
    #[allow(clippy::too_many_arguments)]
    fn sds_step(
        &mut self,
        ds: &Dataset,
        kind: IterationKind,
        maps: &PoseMaps,
        views: &[ViewCamera],
        schedule: &DiffusionSchedule,
        provider: &mut dyn NoiseProvider,
        targets: Option<&dyn TargetSource>,
        lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        let unseen = &self.selection.as_ref().expect("stage II has a view selection").unseen;
        let view = &views[unseen[rng.gen_range(0..unseen.len())]];
        let raster = self.raster();
        let (frame, condition, delta) = match kind {
            IterationKind::CanonicalSds => {
                let delta = DeltaCamera {
                    azimuth_deg: wrap_degrees(view.azimuth_deg),
                    elevation_deg: view.elevation_deg,
                    radius: view.radius - self.config.view_radius,
                };
                (None, self.condition.clone().expect("stage II has a condition image"), delta)
            }
            _ => {
                let f = rng.gen_range(0..ds.len());
                let fr = &ds.frames[f];
                let (az, el, r) = spherical(&fr.camera);
                let img = fr.rgb.masked(&fr.mask, &BACKGROUND)?;
                let crop = CropWindow::from_mask(&fr.mask)?;
                let delta = DeltaCamera {
                    azimuth_deg: wrap_degrees(view.azimuth_deg - az),
                    elevation_deg: view.elevation_deg - el,
                    radius: view.radius - r,
                };
                (Some(f), prepare_guidance_image(&img, &crop, &BACKGROUND), delta)
            }
        };
        let pose = frame.map(|f| self.frame_pose(ds, f));
        let dec = self.avatar.decode(Some(frame.map_or(&maps.rest, |f| &maps.frames[f])))?;
        let r = self.avatar.render(&dec, pose.as_ref(), &view.camera, &BACKGROUND, false, &raster)?;
        let mask = binarize(&r.color.alpha);
        if !mask.data().iter().any(|&m| m > 0.0) {
            log::warn!("avatar not visible from azimuth {}, SDS step skipped", view.azimuth_deg);
            return Ok(StepOutcome {
                report: None,
                sds_norm: 0.0,
                sds_skipped: true,
            });
        }
        let target = match (provider.needs_target(), targets) {
            (true, Some(t)) => Some(t.target(&view.camera, frame.map(|f| &ds.frames[f].pose))?),
            _ => None,
        };
        let outcome = sds_gradient(
            &SdsInputs {
                render: &r.color.image,
                mask: &mask,
                condition: &condition,
                delta_camera: delta,
                background: &BACKGROUND,
                target: target.as_ref(),
            },
            schedule,
            provider,
            rng,
        )?;
        let norm = outcome.norm();
        if outcome.skipped || norm == 0.0 {
            return Ok(StepOutcome {
                report: None,
                sds_norm: norm,
                sds_skipped: outcome.skipped,
            });
        }
        // Mean over the render, normalized like the photometric terms.
        let n = r.color.image.data().len() as f64;
        let g = outcome.gradient.map(|v| v * lambda / n);
        let pg = render_backward_multi(&r.set, &view.camera, &[(&r.color, &g)])?;
        let ag = self.avatar.backward(&dec, &r, &pg, &DirectGrads::default())?;
        self.apply(&ag, None)?;
        Ok(StepOutcome {
            report: None,
            sds_norm: norm,
            sds_skipped: false,
        })
    }

    fn iterations(&self, ds: &Dataset) -> usize {
        self.config.iterations_per_epoch.unwrap_or(ds.len())
    }

    /// Runs Stage I epochs until the epoch budget or the PSNR target is reached,
    /// then marks visibility over every frame.
    pub fn train_stage1(&mut self, ds: &Dataset, log: &mut MetricsLog) -> Result<()> {
        self.check_dataset(ds)?;
        if self.stage != 1 {
            return Err(Error::State("session already left stage I".into()));
        }
        let start = Instant::now();
        while self.epochs_stage1 < self.config.epochs_stage1 {
            let epoch = self.epochs_stage1;
            let n = self.iterations(ds);
            let mut order = Vec::with_capacity(n);
            let mut round = 0u64;
            while order.len() < n {
                order.extend(shuffled_indices(ds.len(), epoch_seed(self.config.seed, 1, epoch) ^ round));
                round += 1;
            }
            order.truncate(n);
            let mut acc = Accumulator::default();
            for &f in &order {
                acc.add(&self.given_step(ds, f, None, 0.0)?);
            }
            self.epochs_stage1 += 1;
            let mut rec = acc.record(1, epoch);
            rec.planned.given = n;
            rec.executed.given = n;
            let stop = self.periodic_eval(ds, None, &mut rec)?;
            rec.elapsed_s = start.elapsed().as_secs_f64();
            log::info!("stage I epoch {epoch}: loss {:.5} seen psnr {:?}", rec.loss, rec.seen_psnr);
            log.write(&rec)?;
            if stop {
                break;
            }
        }
        self.mark_all_visibility(ds)?;
        Ok(())
    }

    fn periodic_eval(&self, ds: &Dataset, maps: Option<&PoseMaps>, rec: &mut EpochRecord) -> Result<bool> {
        let every = self.config.eval_every;
        let last = match self.stage {
            1 => self.epochs_stage1 == self.config.epochs_stage1,
            _ => self.epochs_stage2 == self.config.epochs_stage2,
        };
        let done = if self.stage == 1 { self.epochs_stage1 } else { self.epochs_stage2 };
        if every == 0 || (done % every != 0 && !last) {
            return Ok(false);
        }
        let stage2 = self.stage == 2;
        let ev = self.evaluate_with(ds, maps, stage2, false)?;
        rec.seen_psnr = Some(ev.seen_psnr);
        rec.unseen_psnr = ev.unseen_psnr;
        Ok(match self.stage {
            1 => self.config.stage1_target_psnr.is_some_and(|t| ev.seen_psnr >= t),
            _ => match (self.config.stage2_target, &self.baseline, ev.unseen_psnr) {
                (Some(t), Some(b), Some(u)) => {
                    let base_unseen = b.unseen_psnr.unwrap_or(f64::NEG_INFINITY);
                    u - base_unseen >= t.unseen_gain_db && b.seen_psnr - ev.seen_psnr <= t.seen_drop_db
                }
                _ => false,
            },
        })
    }

    /// Marks every Gaussian that is the first hit of some pixel ray in some frame.
    pub fn mark_all_visibility(&mut self, ds: &Dataset) -> Result<usize> {
        let dec = self.avatar.decode(None)?;
        let raster = self.raster();
        let mut newly = 0;
        for (f, frame) in ds.frames.iter().enumerate() {
            let t = forward_kinematics(&self.avatar.template, &self.frame_pose(ds, f))?;
            let posed = pose_gaussians(&dec.canonical, &t)?;
            let ss = self.config.visibility_supersample;
            newly += mark_visibility_supersampled(&posed, &frame.camera, &raster, ss, &mut self.visibility)?;
        }
        log::info!(
            "{} of {} gaussians visible in the video",
            self.visibility.iter().filter(|&&v| v).count(),
            self.visibility.len()
        );
        Ok(newly)
    }

    pub fn views(&self) -> Result<Vec<ViewCamera>> {
        view_ring(
            self.config.azimuth_samples,
            self.config.overhead_elevation_deg,
            self.config.view_radius,
            Vec3::zeros(),
            self.intrinsics,
        )
    }

    /// Canonical Stage I Gaussians carrying the visibility flags.
    pub fn canonical_with_visibility(&self) -> Result<crate::raster::GaussianSet> {
        let mut set = self.avatar.decode(None)?.canonical;
        set.visibility = self.visibility.clone();
        Ok(set)
    }

    /// Selects unseen views, captures the canonical condition image, records
    /// the Stage I baseline and folds the decoder input for `[S, P]`.
    pub fn enter_stage2(&mut self, ds: &Dataset) -> Result<()> {
        self.check_dataset(ds)?;
        if self.stage != 1 {
            return Err(Error::State("session is not in stage I".into()));
        }
        let raster = self.raster();
        let canonical = self.canonical_with_visibility()?;
        let views = self.views()?;
        let sel = select_views(&canonical, &views, self.config.visibility_threshold, &raster)?;
        log::info!("{} of {} candidate views unseen", sel.unseen.len(), views.len());
        let front = Camera::look_at(0.0, 0.0, self.config.view_radius, Vec3::zeros(), self.intrinsics)?;
        let dec = self.avatar.decode(None)?;
        let r = self.avatar.render(&dec, None, &front, &BACKGROUND, false, &raster)?;
        let mask = binarize(&r.color.alpha);
        let crop = CropWindow::from_mask(&mask)?;
        self.condition = Some(prepare_guidance_image(&r.color.image, &crop, &BACKGROUND));
        self.baseline = Some(self.evaluate(ds)?);
        self.selection = Some(sel);
        self.avatar.decoder.params.fold_duplicate_input(self.avatar.decoder.config.channels);
        self.stage = 2;
        Ok(())
    }

    /// Runs Stage II epochs following the per-epoch iteration plan.
    pub fn train_stage2(
        &mut self,
        ds: &Dataset,
        provider: &mut dyn NoiseProvider,
        targets: Option<&dyn TargetSource>,
        log: &mut MetricsLog,
    ) -> Result<()> {
        if self.stage == 1 {
            self.enter_stage2(ds)?;
        }
        self.check_dataset(ds)?;
        if provider.needs_target() && targets.is_none() {
            return Err(Error::validation(format!("{} provider needs ground-truth targets", provider.name())));
        }
        let schedule = DiffusionSchedule::new(self.config.guidance.clone())?;
        let views = self.views()?;
        let maps = self.pose_maps(ds)?;
        let has_unseen = self.selection.as_ref().is_some_and(|s| !s.unseen.is_empty());
        if !has_unseen {
            log::warn!("no unseen views were selected, stage II runs given-view iterations only");
        }
        let start = Instant::now();
        let mut frame_cursor = Vec::new();
        while self.epochs_stage2 < self.config.epochs_stage2 {
            let epoch = self.epochs_stage2;
            let seed = epoch_seed(self.config.seed, 2, epoch);
            let plan = schedule_epoch(self.iterations(ds), self.config.ratio_dual, self.config.ratio_canonical, seed)?;
            let lambda = sds_weight(epoch, self.config.weights.sds, self.config.sds_t0, self.config.sds_k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_A5A5);
            let mut acc = Accumulator::default();
            let mut executed = IterationCounts::default();
            let (mut skipped, mut norm_sum, mut norm_n) = (0usize, 0.0, 0usize);
            let mut round = 0u64;
            for kind in &plan.order {
                match kind {
                    IterationKind::Given => {
                        if frame_cursor.is_empty() {
                            frame_cursor = shuffled_indices(ds.len(), seed ^ round);
                            round += 1;
                        }
                        let f = frame_cursor.pop().unwrap();
                        let rep = self.given_step(ds, f, Some(&maps), lambda)?;
                        acc.add(&rep);
                        executed.given += 1;
                    }
                    k => {
                        if !has_unseen {
                            skipped += 1;
                            continue;
                        }
                        let out = self.sds_step(ds, *k, &maps, &views, &schedule, provider, targets, lambda, &mut rng)?;
                        if let Some(r) = &out.report {
                            acc.add(r);
                        }
                        skipped += out.sds_skipped as usize;
                        norm_sum += out.sds_norm;
                        norm_n += 1;
                        if *k == IterationKind::CanonicalSds {
                            executed.canonical_sds += 1;
                        } else {
                            executed.observation_sds += 1;
                        }
                    }
                }
            }
            self.epochs_stage2 += 1;
            let sds_total = plan.n_canonical_sds + plan.n_observation_sds;
            if sds_total > 0 && skipped == sds_total {
                log::warn!("every SDS step of stage II epoch {epoch} was skipped, training is given-view only");
            }
            let mut rec = acc.record(2, epoch);
            rec.planned = IterationCounts {
                given: plan.n_given,
                canonical_sds: plan.n_canonical_sds,
                observation_sds: plan.n_observation_sds,
            };
            rec.executed = executed;
            rec.lambda_sds = lambda;
            rec.sds_skipped = skipped;
            rec.sds_grad_norm = if norm_n > 0 { norm_sum / norm_n as f64 } else { 0.0 };
            let stop = self.periodic_eval(ds, Some(&maps), &mut rec)?;
            rec.elapsed_s = start.elapsed().as_secs_f64();
            log::info!(
                "stage II epoch {epoch}: loss {:.5} seen {:?} unseen {:?}",
                rec.loss,
                rec.seen_psnr,
                rec.unseen_psnr
            );
            log.write(&rec)?;
            if stop {
                break;
            }
        }
        Ok(())
    }

    /// Seen (frame cameras) and unseen (eval ring without the front camera)
    /// PSNR/SSIM on every `eval_stride`-th frame.
    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalSummary> {
        self.check_dataset(ds)?;
        let maps = if self.stage == 2 { Some(self.pose_maps(ds)?) } else { None };
        self.evaluate_with(ds, maps.as_ref(), true, true)
    }

    fn evaluate_with(&self, ds: &Dataset, maps: Option<&PoseMaps>, unseen: bool, with_ssim: bool) -> Result<EvalSummary> {
        let raster = self.raster();
        let mut out = EvalSummary::default();
        let score = |img: &ImageBuffer, gt: &ImageBuffer, frame, cam: &Camera| -> Result<ViewScore> {
            let (az, el, _) = spherical(cam);
            Ok(ViewScore {
                frame,
                azimuth_deg: az,
                elevation_deg: el,
                psnr: psnr(img, gt)?,
                ssim: if with_ssim && img.width() >= 11 { ssim(img, gt)? } else { f64::NAN },
            })
        };
        let stage1_dec = if maps.is_none() { Some(self.avatar.decode(None)?) } else { None };
        for f in (0..ds.len()).step_by(self.config.eval_stride) {
            let frame = &ds.frames[f];
            let owned;
            let dec = match (&stage1_dec, maps) {
                (Some(d), _) => d,
                (None, Some(m)) => {
                    owned = self.avatar.decode(Some(&m.frames[f]))?;
                    &owned
                }
                (None, None) => unreachable!(),
            };
            let pose = self.frame_pose(ds, f);
            let img = self.avatar.render_color(dec, Some(&pose), &frame.camera, &BACKGROUND, &raster)?;
            let gt = frame.rgb.masked(&frame.mask, &BACKGROUND)?;
            out.seen.push(score(&img, &gt, f, &frame.camera)?);
            if unseen {
                for ev in ds.eval.iter().filter(|e| wrap_degrees(e.azimuth_deg).abs() > 1e-9 || e.elevation_deg != 0.0) {
                    let img = self.avatar.render_color(dec, Some(&pose), &ev.camera, &BACKGROUND, &raster)?;
                    out.unseen.push(score(&img, &ev.images[f], f, &ev.camera)?);
                }
            }
        }
        out.seen_psnr = mean(out.seen.iter().map(|s| s.psnr)).unwrap_or(f64::NAN);
        out.seen_ssim = mean(out.seen.iter().map(|s| s.ssim)).unwrap_or(f64::NAN);
        out.unseen_psnr = mean(out.unseen.iter().map(|s| s.psnr));
        out.unseen_ssim = mean(out.unseen.iter().map(|s| s.ssim));
        Ok(out)
    }

    /// Decodes and renders an arbitrary pose and camera with the current model.
    pub fn render_pose(&self, pose: Option<&Pose>, camera: &Camera) -> Result<ImageBuffer> {
        let dec = if self.stage == 2 {
            let cov = self.avatar.coverage()?;
            let p = pose.cloned().unwrap_or_else(|| Pose::identity(self.avatar.template.joint_count()));
            self.avatar.decode(Some(&self.avatar.pose_map(&cov, &p)?))?
        } else {
            self.avatar.decode(None)?
        };
        self.avatar.render_color(&dec, pose, camera, &BACKGROUND, &self.raster())
    }
}

#[derive(Default)]
struct Accumulator {
    total: f64,
    n: usize,
    terms: BTreeMap<String, f64>,
}

impl Accumulator {
    fn add(&mut self, r: &LossReport) {
        self.total += r.total;
        self.n += 1;
        for t in &r.terms {
            *self.terms.entry(t.name.clone()).or_default() += t.value;
        }
    }

    fn record(self, stage: u8, epoch: usize) -> EpochRecord {
        let n = self.n.max(1) as f64;
        EpochRecord {
            stage,
            epoch,
            loss: self.total / n,
            terms: self.terms.into_iter().map(|(k, v)| (k, v / n)).collect(),
            ..Default::default()
        }
    }
}

/// Builds a session and runs Stage I.
pub fn train_stage1(ds: &Dataset, config: &TrainConfig, log: &mut MetricsLog) -> Result<Session> {
    let mut s = Session::new(ds, config)?;
    s.train_stage1(ds, log)?;
    Ok(s)
}

/// Continues a Stage I session with score distillation.
pub fn train_stage2(
    ds: &Dataset,
    mut session: Session,
    provider: &mut dyn NoiseProvider,
    targets: Option<&dyn TargetSource>,
    log: &mut MetricsLog,
) -> Result<Session> {
    session.train_stage2(ds, provider, targets, log)?;
    Ok(session)
}
