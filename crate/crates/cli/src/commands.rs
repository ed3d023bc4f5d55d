use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use avatar_core::dataset::{
    generate_synthetic, load_dataset, read_json, write_image, write_json, ImageKind, PosesFile, SynthConfig,
    SyntheticTargets, TargetSource,
};
use avatar_core::decoder::DecoderConfig;
use avatar_core::guidance::{MockProvider, NoiseProvider, OracleProvider, RemoteProvider};
use avatar_core::raster::render_visibility;
use avatar_core::scene::{Camera, ImageBuffer, Vec3};
use avatar_core::trainer::{select_views, Avatar, EvalSummary, MetricsLog, Session, TrainConfig};
use avatar_core::Error;
use serde_json::json;

use crate::{
    AnimateArgs, Command, EvaluateArgs, PreprocessArgs, ProviderKind, RenderArgs, SynthArgs, TrainArgs, ViewArgs,
    VisibilityArgs,
};

pub const GUIDANCE_URL_ENV: &str = "AVATAR_GUIDANCE_URL";

/// 1 for bad input, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_validation() => 1,
        _ => 2,
    }
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::validation(msg).into()
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Animate(a) => animate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Visibility(a) => visibility(a),
    }
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn synth_data(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.frames {
        cfg.frame_count = n;
    }
    if let Some(r) = a.resolution {
        cfg.resolution = r;
    }
    generate_synthetic(&cfg, &a.out)?;
    print_json(&json!({
        "out": a.out,
        "frames": cfg.frame_count,
        "resolution": cfg.resolution,
        "seed": cfg.seed,
        "eval_azimuths_deg": cfg.eval_azimuths_deg,
    }))
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let out = a.out.unwrap_or_else(|| a.data.join("preprocess"));
    let avatar = Avatar::new(ds.template.clone(), a.uv_resolution, a.bake_factor, DecoderConfig::default(), 0)?;
    let rest = avatar_core::trainer::bake_rest(&ds.template, a.uv_resolution, a.bake_factor)?;
    let (w, h) = (rest.width, rest.height);
    let (lo, hi) = rest
        .positions
        .iter()
        .zip(&rest.valid)
        .filter(|(_, &v)| v)
        .fold((Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)), |(lo, hi), (p, _)| {
            (lo.inf(p), hi.sup(p))
        });
    let span = (hi - lo).max().max(1e-12);
    let mut positions = ImageBuffer::new(w, h, 3);
    let mut coverage = ImageBuffer::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if rest.valid[i] {
                let p = (rest.positions[i] - lo) / span;
                for c in 0..3 {
                    positions.set(x, y, c, p[c]);
                }
                coverage.set(x, y, 0, 1.0);
            }
        }
    }
    write_image(&out.join("positions.png"), &positions, ImageKind::Rgb)?;
    write_image(&out.join("coverage.png"), &coverage, ImageKind::Mask)?;
    let summary = json!({
        "uv_resolution": a.uv_resolution,
        "bake_factor": a.bake_factor,
        "valid_texels": rest.valid.iter().filter(|&&v| v).count(),
        "gaussians": avatar.len(),
        "bounds_min": [lo.x, lo.y, lo.z],
        "bounds_max": [hi.x, hi.y, hi.z],
        "normalization": avatar.norm,
    });
    write_json(&out.join("preprocess.json"), &summary)?;
    print_json(&summary)
}

fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    })
}

fn provider_for(a: &TrainArgs) -> Result<(Box<dyn NoiseProvider>, Option<SyntheticTargets>)> {
    Ok(match a.provider {
        ProviderKind::Mock => (Box::new(MockProvider), None),
        ProviderKind::Oracle => {
            let synth = a.data.join("synth.json");
            if !synth.exists() {
                return Err(invalid(format!(
                    "the oracle provider needs a synthetic dataset, {} is missing",
                    synth.display()
                )));
            }
            let cfg: SynthConfig = read_json(&synth)?;
            (Box::new(OracleProvider), Some(SyntheticTargets::new(&cfg)?))
        }
        ProviderKind::Remote => {
            let url = match &a.guidance_url {
                Some(u) => u.clone(),
                None => std::env::var(GUIDANCE_URL_ENV)
                    .map_err(|_| invalid(format!("the remote provider needs --guidance-url or {GUIDANCE_URL_ENV}")))?,
            };
            if !(a.guidance_timeout_s > 0.0 && a.guidance_timeout_s.is_finite()) {
                return Err(invalid("--guidance-timeout-s must be positive"));
            }
            let p = RemoteProvider::new(&url, Duration::from_secs_f64(a.guidance_timeout_s));
            match p.health() {
                Ok(h) => log::info!("guidance service at {url}: {h:?}"),
                Err(e) => log::warn!("guidance service at {url} is not healthy yet: {e}"),
            }
            (Box::new(p), None)
        }
    })
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.data.join("checkpoints").join(format!("stage{}.avck", a.stage)));
    let mut log = match &a.log {
        Some(p) => MetricsLog::create(p)?,
        None => MetricsLog::disabled(),
    };
    let mut session = match &a.checkpoint {
        Some(p) => {
            let mut s = Session::load(p).with_context(|| format!("loading {}", p.display()))?;
            if let Some(c) = &a.config {
                let cfg = load_train_config(Some(c))?;
                let same_model = cfg.uv_resolution == s.config.uv_resolution
                    && cfg.bake_factor == s.config.bake_factor
                    && cfg.decoder == s.config.decoder;
                if !same_model {
                    return Err(invalid("config changes the model layout of the checkpoint"));
                }
                cfg.validate()?;
                s.config = cfg;
            }
            s
        }
        None if a.stage == 2 => return Err(invalid("stage 2 needs --checkpoint from a stage 1 run")),
        None => {
            let mut cfg = load_train_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Session::new(&ds, &cfg)?
        }
    };
    if let Some(seed) = a.seed {
        session.config.seed = seed;
    }
    match a.stage {
        1 => {
            if let Some(e) = a.epochs {
                session.config.epochs_stage1 = e;
            }
            session.train_stage1(&ds, &mut log)?;
        }
        _ => {
            if let Some(e) = a.epochs {
                session.config.epochs_stage2 = e;
            }
            let (mut provider, targets) = provider_for(&a)?;
            let targets = targets.as_ref().map(|t| t as &dyn TargetSource);
            session.train_stage2(&ds, provider.as_mut(), targets, &mut log)?;
        }
    }
    session.save(&out)?;
    let mut summary = session.summary();
    summary["checkpoint"] = json!(out);
    print_json(&summary)
}

fn camera(session: &Session, view: &ViewArgs, azimuth: f64) -> Result<Camera> {
    let radius = view.radius.unwrap_or(session.config.view_radius);
    Ok(Camera::look_at(azimuth, view.elevation, radius, Vec3::zeros(), session.intrinsics)?)
}

fn render(a: RenderArgs) -> Result<()> {
    let session = Session::load(&a.checkpoint)?;
    let azimuths: Vec<f64> = match a.turntable {
        Some(0) => return Err(invalid("--turntable needs at least one view")),
        Some(n) => (0..n).map(|k| 360.0 * k as f64 / n as f64).collect(),
        None => vec![a.view.azimuth],
    };
    let mut written = Vec::new();
    for (k, &az) in azimuths.iter().enumerate() {
        let img = session.render_pose(None, &camera(&session, &a.view, az)?)?;
        let path = a.out.join(format!("view_{k:03}.png"));
        write_image(&path, &img, ImageKind::Rgb)?;
        written.push(json!({ "file": path, "azimuth_deg": az, "elevation_deg": a.view.elevation }));
    }
    print_json(&json!({ "images": written }))
}

fn animate(a: AnimateArgs) -> Result<()> {
    let session = Session::load(&a.checkpoint)?;
    let poses: PosesFile = read_json(&a.poses)?;
    let j = session.avatar.template.joint_count();
    if let Some(i) = poses.frames.iter().position(|p| p.joint_count() != j) {
        return Err(invalid(format!("pose {i} has {} joints, template has {j}", poses.frames[i].joint_count())));
    }
    let cam = camera(&session, &a.view, a.view.azimuth)?;
    let mut written = Vec::new();
    for (i, pose) in poses.frames.iter().enumerate() {
        let img = session.render_pose(Some(pose), &cam)?;
        let path = a.out.join(format!("frame_{i:06}.png"));
        write_image(&path, &img, ImageKind::Rgb)?;
        written.push(path);
    }
    print_json(&json!({ "frames": written }))
}

fn table(ev: &EvalSummary) -> String {
    let mut s = format!("{:<7} {:>6} {:>9} {:>9} {:>8} {:>7}\n", "set", "frame", "azimuth", "elevation", "psnr", "ssim");
    for (name, rows) in [("seen", &ev.seen), ("unseen", &ev.unseen)] {
        for r in rows.iter() {
            s += &format!(
                "{name:<7} {:>6} {:>9.1} {:>9.1} {:>8.2} {:>7.4}\n",
                r.frame, r.azimuth_deg, r.elevation_deg, r.psnr, r.ssim
            );
        }
    }
    s += &format!("mean seen   psnr {:.2} ssim {:.4}\n", ev.seen_psnr, ev.seen_ssim);
    match (ev.unseen_psnr, ev.unseen_ssim) {
        (Some(p), Some(q)) => s += &format!("mean unseen psnr {p:.2} ssim {q:.4}\n"),
        _ => s += "mean unseen n/a (no eval ring)\n",
    }
    s
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let session = Session::load(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset)?;
    let ev = session.evaluate(&ds)?;
    print!("{}", table(&ev));
    let out = a.out.unwrap_or_else(|| a.checkpoint.with_extension("eval.json"));
    write_json(&out, &ev)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn visibility(a: VisibilityArgs) -> Result<()> {
    let session = Session::load(&a.checkpoint)?;
    let threshold = a.threshold.unwrap_or(session.config.visibility_threshold);
    let canonical = session.canonical_with_visibility()?;
    let views = session.views()?;
    let raster = session.raster();
    let sel = select_views(&canonical, &views, threshold, &raster)?;
    let mut cameras = Vec::with_capacity(views.len());
    for (i, v) in views.iter().enumerate() {
        let map = match &a.out {
            Some(dir) => {
                let path: PathBuf = dir.join(format!("visibility_{i:03}.png"));
                let vis = render_visibility(&canonical, &v.camera, &raster)?;
                write_image(&path, &vis.map, ImageKind::Visibility)?;
                Some(path)
            }
            None => None,
        };
        cameras.push(json!({
            "index": i,
            "azimuth_deg": v.azimuth_deg,
            "elevation_deg": v.elevation_deg,
            "ratio": sel.visibility[i],
            "unseen": sel.unseen.contains(&i),
            "map": map,
        }));
    }
    print_json(&json!({
        "threshold": threshold,
        "visible_gaussians": session.visibility.iter().filter(|&&v| v).count(),
        "gaussians": session.visibility.len(),
        "unseen": sel.unseen,
        "cameras": cameras,
    }))
}
