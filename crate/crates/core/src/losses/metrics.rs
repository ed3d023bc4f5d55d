use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 99.0;

fn mask_weights(a: &ImageBuffer, mask: Option<&ImageBuffer>) -> Result<Option<Vec<bool>>> {
    match mask {
        None => Ok(None),
        Some(m) => {
            a.check_mask(m)?;
            Ok(Some(m.data().iter().map(|&v| v >= 0.5).collect()))
        }
    }
}

/// Mean squared difference and its gradient with respect to `a`.
///
/// With a mask only foreground pixels (mask >= 0.5) count; an empty mask gives 0.
pub fn mse_grad(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&ImageBuffer>) -> Result<(f64, ImageBuffer)> {
    a.same_shape(b)?;
    let keep = mask_weights(a, mask)?;
    let c = a.channels();
    let mut grad = ImageBuffer::new(a.width(), a.height(), c);
    let count = match &keep {
        Some(k) => k.iter().filter(|&&v| v).count() * c,
        None => a.data().len(),
    };
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    let g = grad.data_mut();
    for (e, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if keep.as_ref().is_some_and(|k| !k[e / c]) {
            continue;
        }
        let d = x - y;
        sum += d * d;
        g[e] = 2.0 * d * inv;
    }
    Ok((sum * inv, grad))
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&ImageBuffer>) -> Result<f64> {
    mse_grad(a, b, mask).map(|r| r.0)
}

/// Masked MSE over the three normal channels.
pub fn normal_loss_grad(n: &ImageBuffer, n_gt: &ImageBuffer, mask: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    if n.channels() != 3 {
        return Err(Error::shape("3-channel normal map", n.shape_string()));
    }
    mse_grad(n, n_gt, Some(mask))
}

pub fn normal_loss(n: &ImageBuffer, n_gt: &ImageBuffer, mask: &ImageBuffer) -> Result<f64> {
    normal_loss_grad(n, n_gt, mask).map(|r| r.0)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, None)?))
}

/// Square root of the sum of squares, with gradient `x / |x|` (zero at the origin).
pub fn frobenius_grad(x: &[f64]) -> (f64, Vec<f64>) {
    let n = frobenius(x);
    let g = if n > 0.0 { x.iter().map(|v| v / n).collect() } else { vec![0.0; x.len()] };
    (n, g)
}

pub fn frobenius(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable window filter over a `w x h` plane, valid positions only.
fn filter_valid(p: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &p[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = g[y * ow + x];
            for i in 0..n {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..n {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn plane(img: &ImageBuffer, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(img.channels()).copied().collect()
}

/// Single-scale SSIM (11x11 Gaussian window, sigma 1.5, data range 1) averaged
/// over valid window positions and channels, with its gradient in `a`.
pub fn ssim_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    a.same_shape(b)?;
    let (w, h, ch) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::validation(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let positions = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let norm = 1.0 / (positions * ch as f64);
    let mut total = 0.0;
    let mut grad = ImageBuffer::new(w, h, ch);
    for c in 0..ch {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let ma = filter_valid(&pa, w, h, &k);
        let mb = filter_valid(&pb, w, h, &k);
        let eaa = filter_valid(&sq(&pa, &pa), w, h, &k);
        let ebb = filter_valid(&sq(&pb, &pb), w, h, &k);
        let eab = filter_valid(&sq(&pa, &pb), w, h, &k);
        let n = ma.len();
        let mut g_mu = vec![0.0; n];
        let mut g_aa = vec![0.0; n];
        let mut g_ab = vec![0.0; n];
        for p in 0..n {
            let (mua, mub) = (ma[p], mb[p]);
            let va = eaa[p] - mua * mua;
            let vb = ebb[p] - mub * mub;
            let cov = eab[p] - mua * mub;
            let a1 = 2.0 * mua * mub + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = mua * mua + mub * mub + c1;
            let b2 = va + vb + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            let ds_dmu = 2.0 * mub * a2 / (b1 * b2) - s * 2.0 * mua / b1;
            let ds_dcov = 2.0 * a1 / (b1 * b2);
            let ds_dva = -s / b2;
            // Chain through va = Eaa - mua^2 and cov = Eab - mua mub.
            g_mu[p] = norm * (ds_dmu - 2.0 * mua * ds_dva - mub * ds_dcov);
            g_aa[p] = norm * ds_dva;
            g_ab[p] = norm * ds_dcov;
        }
        let dmu = filter_valid_adjoint(&g_mu, w, h, &k);
        let daa = filter_valid_adjoint(&g_aa, w, h, &k);
        let dab = filter_valid_adjoint(&g_ab, w, h, &k);
        let gd = grad.data_mut();
        for q in 0..w * h {
            gd[q * ch + c] = dmu[q] + 2.0 * pa[q] * daa[q] + pb[q] * dab[q];
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_grad(a, b).map(|r| r.0)
}

/// 2x2 box average, dropping a trailing odd row or column.
pub fn box_downsample(img: &ImageBuffer) -> ImageBuffer {
    let (w, h, c) = (img.width() / 2, img.height() / 2, img.channels());
    let mut out = ImageBuffer::new(w.max(1), h.max(1), c);
    if w == 0 || h == 0 {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                let s = img.get(2 * x, 2 * y, k)
                    + img.get(2 * x + 1, 2 * y, k)
                    + img.get(2 * x, 2 * y + 1, k)
                    + img.get(2 * x + 1, 2 * y + 1, k);
                out.set(x, y, k, 0.25 * s);
            }
        }
    }
    out
}

fn box_downsample_adjoint(g: &ImageBuffer, w: usize, h: usize) -> ImageBuffer {
    let mut out = ImageBuffer::new(w, h, g.channels());
    if w < 2 || h < 2 {
        return out;
    }
    for y in 0..g.height() {
        for x in 0..g.width() {
            for k in 0..g.channels() {
                let v = 0.25 * g.get(x, y, k);
                for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let i = out.index(2 * x + dx, 2 * y + dy, k);
                    out.data_mut()[i] += v;
                }
            }
        }
    }
    out
}

/// Pluggable perceptual distance. Implementations return the distance and,
/// when they can, its gradient in the first image.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance_grad(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Option<ImageBuffer>)>;
}

/// Non-perceptual stand-in: mean of the MSEs of a 3-level 2x2 box pyramid.
/// It is not LPIPS.
#[derive(Clone, Copy, Debug, Default)]
pub struct PyramidL2;

pub const PYRAMID_LEVELS: usize = 3;

impl PerceptualMetric for PyramidL2 {
    fn name(&self) -> &str {
        "pyramid-l2"
    }

    fn distance_grad(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, Option<ImageBuffer>)> {
        a.same_shape(b)?;
        let mut la = vec![a.clone()];
        let mut lb = vec![b.clone()];
        for l in 1..PYRAMID_LEVELS {
            la.push(box_downsample(&la[l - 1]));
            lb.push(box_downsample(&lb[l - 1]));
        }
        let scale = 1.0 / PYRAMID_LEVELS as f64;
        let mut total = 0.0;
        let mut back: Option<ImageBuffer> = None;
        for l in (0..PYRAMID_LEVELS).rev() {
            let (v, mut g) = mse_grad(&la[l], &lb[l], None)?;
            total += scale * v;
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
            if let Some(up) = back.take() {
                g.add_scaled(&up, 1.0);
            }
            back = Some(if l > 0 {
                box_downsample_adjoint(&g, la[l - 1].width(), la[l - 1].height())
            } else {
                g
            });
        }
        Ok((total, back))
    }
}
