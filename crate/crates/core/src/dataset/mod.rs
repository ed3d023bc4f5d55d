//! Dataset layout, loading, image codecs and the synthetic humanoid generator.
//!
//! ```text
//! frames/%06d.png        rgb
//! masks/%06d.png         foreground, 8-bit binary
//! normals/%06d.png       camera-space normals, optional
//! cameras.json           per-frame cameras plus the eval ring
//! poses.json             per-frame axis-angles and root translation
//! template.avft          skinned template
//! eval/cam_%02d/%06d.png eval ring renders, optional
//! synth.json             generator settings (synthetic data only)
//! ```

mod codec;
mod humanoid;

pub use codec::*;
pub use humanoid::*;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{prepare, composite, Attribute, GaussianSet, RasterConfig};
use crate::scene::{Camera, ImageBuffer, Intrinsics, Pose, SkinnedTemplate, Vec3};
use crate::skinning::{forward_kinematics, pose_gaussians};

pub const BACKGROUND: [f64; 3] = [1.0, 1.0, 1.0];
pub const NORMAL_BACKGROUND: [f64; 3] = [0.0, 0.0, 0.0];

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    /// Relative brightness modulation of the checker pattern.
    pub checker: f64,
    /// Seeded per-part colour perturbation amplitude.
    pub jitter: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig { checker: 0.08, jitter: 0.04 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frame_count: usize,
    pub resolution: usize,
    pub seed: u64,
    pub motion: Motion,
    pub texture: TextureConfig,
    pub eval_azimuths_deg: Vec<f64>,
    pub camera_radius: f64,
    /// Focal length in units of the image size.
    pub focal: f64,
    /// Ground-truth splats are sampled on a `gt_density^2` texel grid.
    pub gt_density: usize,
    /// Splat scale in units of the local sample spacing.
    pub gt_scale: f64,
    /// Inward offset of splat centres, in pixels at the camera distance.
    pub gt_inset: f64,
    pub mesh_segments: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_count: 60,
            resolution: 128,
            seed: 7,
            motion: Motion::default(),
            texture: TextureConfig::default(),
            eval_azimuths_deg: (0..8).map(|k| 45.0 * k as f64).collect(),
            camera_radius: 5.0,
            focal: 2.4,
            gt_density: 160,
            gt_scale: 0.6,
            gt_inset: 1.7,
            mesh_segments: 24,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::validation(format!("frame_count must be at least 2, got {}", self.frame_count)));
        }
        if self.resolution < 32 {
            return Err(Error::validation(format!("resolution must be at least 32, got {}", self.resolution)));
        }
        if !(self.camera_radius > 0.0 && self.focal > 0.0 && self.gt_scale > 0.0) {
            return Err(Error::validation("camera_radius, focal and gt_scale must be positive"));
        }
        if self.gt_density < 16 || self.mesh_segments < 4 {
            return Err(Error::validation("gt_density must be >= 16 and mesh_segments >= 4"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::square(self.resolution, self.focal * self.resolution as f64)
    }

    pub fn front_camera(&self) -> Result<Camera> {
        Camera::look_at(0.0, 0.0, self.camera_radius, Vec3::zeros(), self.intrinsics())
    }

    /// The humanoid with seeded colour perturbations applied.
    pub fn humanoid(&self) -> Humanoid {
        let mut h = Humanoid::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = self.texture.jitter;
        for c in &mut h.capsules {
            for col in [&mut c.front, &mut c.back] {
                for v in col.iter_mut() {
                    *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
                }
            }
        }
        h
    }

    /// Template as stored on disk (f32-exact).
    pub fn template(&self, humanoid: &Humanoid) -> SkinnedTemplate {
        let mut t = humanoid.template(self.mesh_segments, self.mesh_segments);
        t.quantize_to_f32();
        t
    }

    pub fn ground_truth(&self, humanoid: &Humanoid) -> GaussianSet {
        let inset = self.gt_inset * self.camera_radius / (self.focal * self.resolution as f64);
        humanoid.ground_truth(self.gt_density, self.gt_scale, inset, self.texture.checker)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCamera {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamerasFile {
    pub frames: Vec<Camera>,
    #[serde(default)]
    pub eval: Vec<EvalCamera>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosesFile {
    #[serde(default)]
    pub joint_names: Vec<String>,
    pub frames: Vec<Pose>,
}

/// Clean renders of the ground truth for arbitrary cameras and poses.
pub trait TargetSource {
    /// `None` renders the rest pose.
    fn target(&self, camera: &Camera, pose: Option<&Pose>) -> Result<ImageBuffer>;
}

pub struct SyntheticTargets {
    pub template: SkinnedTemplate,
    pub ground_truth: GaussianSet,
    pub raster: RasterConfig,
}

impl SyntheticTargets {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let h = config.humanoid();
        Ok(SyntheticTargets {
            template: config.template(&h),
            ground_truth: config.ground_truth(&h),
            raster: RasterConfig::default(),
        })
    }

    pub fn posed(&self, pose: Option<&Pose>) -> Result<GaussianSet> {
        match pose {
            None => Ok(self.ground_truth.clone()),
            Some(p) => pose_gaussians(&self.ground_truth, &forward_kinematics(&self.template, p)?),
        }
    }

    /// Colour image with accumulated alpha, plus the normal image.
    pub fn render_all(&self, camera: &Camera, pose: Option<&Pose>) -> Result<(ImageBuffer, ImageBuffer, ImageBuffer)> {
        let posed = self.posed(pose)?;
        let prepared = prepare(&posed, camera, &self.raster)?;
        let rgb = composite(&prepared, &posed, Attribute::Color, camera, &BACKGROUND)?;
        let normal = composite(&prepared, &posed, Attribute::Normal, camera, &NORMAL_BACKGROUND)?;
        Ok((rgb.image, rgb.alpha, normal.image))
    }
}

impl TargetSource for SyntheticTargets {
    fn target(&self, camera: &Camera, pose: Option<&Pose>) -> Result<ImageBuffer> {
        let posed = self.posed(pose)?;
        let prepared = prepare(&posed, camera, &self.raster)?;
        Ok(composite(&prepared, &posed, Attribute::Color, camera, &BACKGROUND)?.image)
    }
}

pub fn frame_file(dir: &str, index: usize) -> PathBuf {
    PathBuf::from(dir).join(format!("{index:06}.png"))
}

pub fn eval_file(camera: usize, index: usize) -> PathBuf {
    PathBuf::from("eval").join(format!("cam_{camera:02}")).join(format!("{index:06}.png"))
}

pub fn binarize(alpha: &ImageBuffer) -> ImageBuffer {
    alpha.map(|a| if a >= 0.5 { 1.0 } else { 0.0 })
}

/// Writes the synthetic dataset into `out`.
pub fn generate_synthetic(config: &SynthConfig, out: &Path) -> Result<()> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let targets = SyntheticTargets::new(config)?;
    targets.template.save(&out.join("template.avft"))?;
    let intr = config.intrinsics();
    let front = config.front_camera()?;
    let ring = config
        .eval_azimuths_deg
        .iter()
        .map(|&az| {
            Ok(EvalCamera {
                azimuth_deg: az,
                elevation_deg: 0.0,
                radius: config.camera_radius,
                camera: Camera::look_at(az, 0.0, config.camera_radius, Vec3::zeros(), intr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let poses: Vec<Pose> = (0..config.frame_count).map(|f| config.motion.pose(f, config.frame_count)).collect();
    for (f, pose) in poses.iter().enumerate() {
        let (rgb, alpha, normal) = targets.render_all(&front, Some(pose))?;
        write_image(&out.join(frame_file("frames", f)), &rgb, ImageKind::Rgb)?;
        write_image(&out.join(frame_file("masks", f)), &binarize(&alpha), ImageKind::Mask)?;
        write_image(&out.join(frame_file("normals", f)), &normal, ImageKind::Normal)?;
        for (k, ev) in ring.iter().enumerate() {
            let img = targets.target(&ev.camera, Some(pose))?;
            write_image(&out.join(eval_file(k, f)), &img, ImageKind::Rgb)?;
        }
        log::debug!("synthetic frame {f} written");
    }
    write_json(
        &out.join("cameras.json"),
        &CamerasFile {
            frames: vec![front; config.frame_count],
            eval: ring,
        },
    )?;
    write_json(
        &out.join("poses.json"),
        &PosesFile {
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            frames: poses,
        },
    )?;
    write_json(&out.join("synth.json"), config)?;
    log::info!("wrote {} synthetic frames to {}", config.frame_count, out.display());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub rgb: ImageBuffer,
    pub mask: ImageBuffer,
    pub normal: Option<ImageBuffer>,
    pub pose: Pose,
    pub camera: Camera,
}

#[derive(Clone, Debug)]
pub struct EvalView {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub camera: Camera,
    /// One ground-truth render per frame.
    pub images: Vec<ImageBuffer>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub frames: Vec<Frame>,
    pub template: SkinnedTemplate,
    pub eval: Vec<EvalView>,
    pub normals_present: bool,
    pub synth: Option<SynthConfig>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn eval_present(&self) -> bool {
        !self.eval.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].rgb.width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].rgb.height()
    }

    /// Camera-independent checks relating frames, poses and the template.
    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::validation("dataset has no frames"));
        }
        self.template.validate()?;
        let (w, h) = (self.width(), self.height());
        for (i, f) in self.frames.iter().enumerate() {
            if f.rgb.width() != w || f.rgb.height() != h {
                return Err(Error::validation(format!("frame {i} is {}, expected {w}x{h}", f.rgb.shape_string())));
            }
            f.rgb.check_mask(&f.mask)?;
            if f.camera.width() != w || f.camera.height() != h {
                return Err(Error::validation(format!("camera {i} does not match the {w}x{h} frames")));
            }
            f.pose
                .validate(self.template.joint_count())
                .map_err(|e| Error::validation(format!("pose {i}: {e}")))?;
            if let Some(n) = &f.normal {
                n.same_shape(&f.rgb)?;
            }
        }
        Ok(())
    }
}

fn exists(p: &Path) -> bool {
    p.try_exists().unwrap_or(false)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let cameras: CamerasFile = read_json(&dir.join("cameras.json"))?;
    let poses: PosesFile = read_json(&dir.join("poses.json"))?;
    let template = SkinnedTemplate::load(&dir.join("template.avft"))?;
    let n = poses.frames.len();
    if cameras.frames.len() != n {
        return Err(Error::validation(format!(
            "cameras.json has {} frames but poses.json has {n}",
            cameras.frames.len()
        )));
    }
    let mut images = 0;
    while exists(&dir.join(frame_file("frames", images))) {
        images += 1;
    }
    if images != n {
        return Err(Error::validation(format!("frames/ holds {images} images but poses.json has {n} frames")));
    }
    let normals_present = exists(&dir.join("normals"));
    if !normals_present {
        log::warn!("{} has no normals/, normal supervision disabled", dir.display());
    }
    let mut frames = Vec::with_capacity(n);
    for (i, (pose, camera)) in poses.frames.into_iter().zip(cameras.frames).enumerate() {
        let normal = if normals_present {
            Some(read_image(&dir.join(frame_file("normals", i)), ImageKind::Normal)?)
        } else {
            None
        };
        frames.push(Frame {
            rgb: read_image(&dir.join(frame_file("frames", i)), ImageKind::Rgb)?,
            mask: read_image(&dir.join(frame_file("masks", i)), ImageKind::Mask)?,
            normal,
            pose,
            camera,
        });
    }
    let mut eval = Vec::new();
    if exists(&dir.join("eval")) {
        for (k, ev) in cameras.eval.into_iter().enumerate() {
            let images = (0..n)
                .map(|i| read_image(&dir.join(eval_file(k, i)), ImageKind::Rgb))
                .collect::<Result<Vec<_>>>()?;
            eval.push(EvalView {
                azimuth_deg: ev.azimuth_deg,
                elevation_deg: ev.elevation_deg,
                radius: ev.radius,
                camera: ev.camera,
                images,
            });
        }
    } else {
        log::warn!("{} has no eval/, evaluation limited to seen views", dir.display());
    }
    let synth_path = dir.join("synth.json");
    let synth = if exists(&synth_path) { Some(read_json(&synth_path)?) } else { None };
    let ds = Dataset {
        root: dir.to_path_buf(),
        frames,
        template,
        eval,
        normals_present,
        synth,
    };
    ds.validate()?;
    Ok(ds)
}
