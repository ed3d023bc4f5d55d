mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use avatar_core::guidance::*;
use avatar_core::scene::ImageBuffer;
use avatar_core::Result;
use common::*;
use rand::Rng;

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(ScheduleConfig::default()).unwrap()
}

#[test]
fn alpha_bar_matches_product_oracle() {
    let s = schedule();
    for t in [0, 1, 17, 500, 999] {
        let mut p = 1.0;
        for i in 0..=t {
            p *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar(t).unwrap() - p).abs() < 1e-10);
    }
    let w = DiffusionSchedule::new(ScheduleConfig {
        weighting: Weighting::OneMinusAlphaBar,
        ..Default::default()
    })
    .unwrap();
    assert!((w.weight(300).unwrap() - (1.0 - s.alpha_bar(300).unwrap())).abs() < 1e-15);
    assert!((1..1000).all(|t| s.weight(t).unwrap() == 1.0));
}

#[test]
fn noising_closed_forms() {
    let s = schedule();
    let mut r = rng(1);
    let x = random_image(&mut r, 8, 8, 3, 0.0, 1.0);
    let zero = ImageBuffer::new(8, 8, 3);
    let z = add_noise(&x, 400, &zero, &s).unwrap();
    let sa = s.alpha_bar(400).unwrap().sqrt();
    for (zv, xv) in z.data().iter().zip(to_signed(&x).data()) {
        assert_eq!(*zv, sa * xv);
    }
    let eps = standard_normal(8, 8, 3, &mut r);
    let z1 = add_noise(&x, 1, &eps, &s).unwrap();
    let bound = (1.0 - s.alpha_bar(1).unwrap()).sqrt();
    for ((zv, xv), e) in z1.data().iter().zip(to_signed(&x).data()).zip(eps.data()) {
        assert!((zv - xv).abs() <= bound * e.abs() + (1.0 - sa) + 1e-3);
    }
    assert!(add_noise(&x, 1000, &eps, &s).is_err());
}

fn dot(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn resample_adjoint_dot_product() {
    let mut r = rng(2);
    for (w, h, crop, n) in [
        (40, 30, CropWindow { x0: -5.3, y0: 2.1, side: 31.7 }, 64),
        (17, 23, CropWindow { x0: 3.0, y0: -1.0, side: 9.0 }, 32),
        (64, 64, CropWindow { x0: 0.0, y0: 0.0, side: 64.0 }, 256),
        (50, 20, CropWindow { x0: 10.2, y0: -20.0, side: 60.0 }, 16),
    ] {
        let u = random_image(&mut r, w, h, 3, -1.0, 1.0);
        let v = random_image(&mut r, n, n, 3, -1.0, 1.0);
        let lhs = dot(&crop.resample(&u, n, &[0.0; 3]), &v);
        let rhs = dot(&u, &crop.resample_adjoint(&v, w, h));
        assert!((lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0));
    }
}

#[test]
fn crop_window_pads_the_mask_box() {
    let mut m = ImageBuffer::new(40, 40, 1);
    for y in 10..30 {
        for x in 15..25 {
            m.set(x, y, 0, 1.0);
        }
    }
    let c = CropWindow::from_mask(&m).unwrap();
    assert!((c.side - 24.0).abs() < 1e-12);
    assert!((c.x0 - 8.0).abs() < 1e-12 && (c.y0 - 8.0).abs() < 1e-12);
    assert!(CropWindow::from_mask(&ImageBuffer::new(4, 4, 1)).unwrap_err().is_validation());
    // A constant image resamples to the same constant.
    let flat = ImageBuffer::filled(40, 40, &[0.25, 0.5, 0.75]);
    let out = c.resample(&flat, 32, &[0.0; 3]);
    assert!(out.data().chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-12 && (p[2] - 0.75).abs() < 1e-12));
}

struct Scene {
    render: ImageBuffer,
    target: ImageBuffer,
    mask: ImageBuffer,
    condition: ImageBuffer,
}

fn scene(seed: u64) -> Scene {
    let mut r = rng(seed);
    let (w, h) = (48, 40);
    let mut render = ImageBuffer::filled(w, h, &[1.0, 1.0, 1.0]);
    let mut target = render.clone();
    let mut mask = ImageBuffer::new(w, h, 1);
    for y in 8..34 {
        for x in 12..30 {
            mask.set(x, y, 0, 1.0);
            for c in 0..3 {
                render.set(x, y, c, r.gen());
                target.set(x, y, c, r.gen());
            }
        }
    }
    let condition = to_signed(&random_image(&mut r, GUIDANCE_SIZE, GUIDANCE_SIZE, 3, 0.0, 1.0));
    Scene { render, target, mask, condition }
}

impl Scene {
    fn inputs(&self) -> SdsInputs<'_> {
        SdsInputs {
            render: &self.render,
            mask: &self.mask,
            condition: &self.condition,
            delta_camera: DeltaCamera { azimuth_deg: 180.0, elevation_deg: 0.0, radius: 0.0 },
            background: &[1.0, 1.0, 1.0],
            target: Some(&self.target),
        }
    }
}

#[test]
fn mock_provider_gives_zero_gradients() {
    let s = schedule();
    let sc = scene(3);
    let mut r = rng(4);
    for _ in 0..100 {
        let out = sds_gradient(&sc.inputs(), &s, &mut MockProvider, &mut r).unwrap();
        assert!(!out.skipped);
        assert!(out.gradient.data().iter().all(|&g| g == 0.0));
    }
}

/// Records the last query so the closed form can be checked.
struct Recording<P> {
    inner: P,
    last: Option<(ImageBuffer, ImageBuffer, f64, ImageBuffer)>,
}

impl<P: NoiseProvider> NoiseProvider for Recording<P> {
    fn name(&self) -> &str {
        "recording"
    }
    fn needs_target(&self) -> bool {
        self.inner.needs_target()
    }
    fn predict(&mut self, q: &NoiseQuery) -> Result<ImageBuffer> {
        let out = self.inner.predict(q)?;
        self.last = Some((q.request.z_t.clone(), q.noise.clone(), q.alpha_bar, out.clone()));
        Ok(out)
    }
}

#[test]
fn oracle_matches_closed_form() {
    let s = schedule();
    let sc = scene(5);
    let mut r = rng(6);
    let mut p = Recording { inner: OracleProvider, last: None };
    for _ in 0..10 {
        let out = sds_gradient(&sc.inputs(), &s, &mut p, &mut r).unwrap();
        let (_, eps, a, eps_hat) = p.last.clone().unwrap();
        let x = prepare_guidance_image(&sc.render, &out.crop, &[1.0; 3]);
        let xs = prepare_guidance_image(&sc.target, &out.crop, &[1.0; 3]);
        let k = a.sqrt() / (1.0 - a).sqrt();
        for i in 0..eps.data().len() {
            let want = k * (x.data()[i] - xs.data()[i]);
            assert!((eps_hat.data()[i] - eps.data()[i] - want).abs() < 1e-5 * want.abs().max(1.0));
        }
    }
    // Identity target: predicted noise equals the injected noise.
    let same = SdsInputs { target: Some(&sc.render), ..sc.inputs() };
    sds_gradient(&same, &s, &mut p, &mut r).unwrap();
    let (_, eps, _, eps_hat) = p.last.unwrap();
    assert!(eps.data().iter().zip(eps_hat.data()).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn oracle_gradient_pulls_towards_target() {
    let s = schedule();
    let sc = scene(7);
    let mut r = rng(8);
    let mut diff = sc.render.clone();
    diff.add_scaled(&sc.target, -1.0);
    for _ in 0..16 {
        let out = sds_gradient(&sc.inputs(), &s, &mut OracleProvider, &mut r).unwrap();
        assert!(dot(&out.gradient, &diff) > 0.0);
        // Zero outside the padded crop.
        assert!(out.gradient.pixel(0, 0).iter().all(|&g| g == 0.0));
    }
    let missing = SdsInputs { target: None, ..sc.inputs() };
    assert!(sds_gradient(&missing, &s, &mut OracleProvider, &mut r).unwrap().skipped);
}

#[test]
fn wire_array_round_trip() {
    let mut r = rng(9);
    let img = random_image(&mut r, 5, 3, 3, -1.0, 1.0).map(|v| v as f32 as f64);
    let w = WireArray::encode(&img);
    assert_eq!(w.shape, vec![3, 5, 3]);
    assert_eq!(w.decode().unwrap(), img);
    let bad = WireArray { shape: vec![3, 5], ..w.clone() };
    assert!(bad.decode().is_err());
    let short = WireArray { shape: vec![3, 5, 4], ..w };
    assert!(short.decode().is_err());
}

enum Mode {
    Echo,
    FailFirst,
    AlwaysFail,
    Garbage,
}

/// Minimal service speaking the noise-prediction protocol; echoes `z_t`.
fn spawn_server(mode: Mode) -> (String, Arc<AtomicUsize>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let port = server.server_addr().to_ip().unwrap().port();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let n = counter.fetch_add(1, Ordering::SeqCst);
            if req.url() == HEALTH_PATH {
                let body = r#"{"status":"ok","model":"echo"}"#;
                let _ = req.respond(tiny_http::Response::from_string(body));
                continue;
            }
            let mut body = String::new();
            req.as_reader().read_to_string(&mut body).unwrap();
            let fail = match mode {
                Mode::AlwaysFail => true,
                Mode::FailFirst => n == 0,
                _ => false,
            };
            if fail {
                let _ = req.respond(tiny_http::Response::from_string("busy").with_status_code(503));
                continue;
            }
            if let Mode::Garbage = mode {
                let _ = req.respond(tiny_http::Response::from_string("{\"nope\":1}"));
                continue;
            }
            let parsed: WireRequest = match serde_json::from_str(&body) {
                Ok(p) => p,
                Err(_) => {
                    let _ = req.respond(tiny_http::Response::from_string("bad").with_status_code(400));
                    continue;
                }
            };
            assert_eq!(req.url(), NOISE_PATH);
            assert_eq!(parsed.z_t.shape, vec![256, 256, 3]);
            assert_eq!(parsed.condition.dtype, "f32le");
            let resp = WireResponse { epsilon: parsed.z_t };
            let _ = req.respond(tiny_http::Response::from_string(serde_json::to_string(&resp).unwrap()));
        }
    });
    (format!("http://127.0.0.1:{port}"), hits)
}

/// In-process provider returning `z_t` rounded exactly like the wire format.
struct EchoZt;

impl NoiseProvider for EchoZt {
    fn name(&self) -> &str {
        "echo"
    }
    fn predict(&mut self, q: &NoiseQuery) -> Result<ImageBuffer> {
        Ok(q.request.z_t.map(|v| v as f32 as f64))
    }
}

#[test]
fn remote_provider_matches_in_process_echo() {
    let (url, _) = spawn_server(Mode::Echo);
    let mut remote = RemoteProvider::new(&url, Duration::from_secs(10));
    let h = remote.health().unwrap();
    assert_eq!((h.status.as_str(), h.model.as_str()), ("ok", "echo"));
    let s = schedule();
    let sc = scene(10);
    let (mut r1, mut r2) = (rng(11), rng(11));
    for _ in 0..3 {
        let a = sds_gradient(&sc.inputs(), &s, &mut remote, &mut r1).unwrap();
        let b = sds_gradient(&sc.inputs(), &s, &mut EchoZt, &mut r2).unwrap();
        assert!(!a.skipped);
        assert_eq!(a.timestep, b.timestep);
        assert_eq!(a.gradient, b.gradient);
    }
}

#[test]
fn remote_provider_retries_once_then_gives_up() {
    let s = schedule();
    let sc = scene(12);
    let mut r = rng(13);

    let (url, hits) = spawn_server(Mode::FailFirst);
    let mut p = RemoteProvider::new(&url, Duration::from_secs(10));
    assert!(!sds_gradient(&sc.inputs(), &s, &mut p, &mut r).unwrap().skipped);
    assert_eq!(hits.load(Ordering::SeqCst), 2);

    let (url, hits) = spawn_server(Mode::AlwaysFail);
    let mut p = RemoteProvider::new(&url, Duration::from_secs(10));
    let out = sds_gradient(&sc.inputs(), &s, &mut p, &mut r).unwrap();
    assert!(out.skipped);
    assert!(out.gradient.data().iter().all(|&g| g == 0.0));
    assert_eq!(hits.load(Ordering::SeqCst), 2);

    let (url, _) = spawn_server(Mode::Garbage);
    let mut p = RemoteProvider::new(&url, Duration::from_secs(10));
    assert!(sds_gradient(&sc.inputs(), &s, &mut p, &mut r).unwrap().skipped);

    // Nothing listening.
    let mut p = RemoteProvider::new("http://127.0.0.1:9", Duration::from_millis(300));
    assert!(sds_gradient(&sc.inputs(), &s, &mut p, &mut r).unwrap().skipped);
    assert!(p.health().is_err());
}

#[test]
fn request_validation() {
    let s = schedule();
    let img = ImageBuffer::new(4, 4, 3);
    let req = GuidanceRequest { z_t: img.clone(), condition: img.clone(), t: 0, delta_camera: DeltaCamera::default() };
    assert!(req.validate(s.steps()).is_err());
    let ok = GuidanceRequest { t: 500, ..req.clone() };
    assert!(ok.validate(s.steps()).is_ok());
    let bad = GuidanceRequest { condition: ImageBuffer::new(3, 4, 3), ..ok };
    assert!(bad.validate(s.steps()).is_err());
    let sc = scene(14);
    let empty = ImageBuffer::new(48, 40, 1);
    let inp = SdsInputs { mask: &empty, ..sc.inputs() };
    assert!(sds_gradient(&inp, &s, &mut MockProvider, &mut rng(0)).is_err());
}
