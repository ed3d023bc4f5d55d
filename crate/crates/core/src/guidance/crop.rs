use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

pub const GUIDANCE_SIZE: usize = 256;
pub const CROP_PADDING: f64 = 0.1;

/// Square window in source pixel units; may extend past the image border.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropWindow {
    /// Square around the foreground bounding box of `mask` (values >= 0.5),
    /// padded by `CROP_PADDING` of the longer side on every edge.
    pub fn from_mask(mask: &ImageBuffer) -> Result<Self> {
        let (mut x_lo, mut y_lo, mut x_hi, mut y_hi) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(x, y, 0) >= 0.5 {
                    x_lo = x_lo.min(x);
                    y_lo = y_lo.min(y);
                    x_hi = x_hi.max(x + 1);
                    y_hi = y_hi.max(y + 1);
                }
            }
        }
        if x_lo == usize::MAX {
            return Err(Error::validation("guidance crop needs a non-empty mask"));
        }
        let (bw, bh) = ((x_hi - x_lo) as f64, (y_hi - y_lo) as f64);
        let side = bw.max(bh) * (1.0 + 2.0 * CROP_PADDING);
        let cx = 0.5 * (x_lo + x_hi) as f64;
        let cy = 0.5 * (y_lo + y_hi) as f64;
        Ok(CropWindow {
            x0: cx - 0.5 * side,
            y0: cy - 0.5 * side,
            side,
        })
    }

    pub fn full(img: &ImageBuffer) -> Self {
        CropWindow {
            x0: 0.0,
            y0: 0.0,
            side: img.width().max(img.height()) as f64,
        }
    }

    /// Bilinear taps `(x, y, weight)` for output pixel `(u, v)` of an `n x n` resample.
    fn taps(&self, u: usize, v: usize, n: usize, w: usize, h: usize, out: &mut Vec<(usize, usize, f64)>) {
        out.clear();
        let step = self.side / n as f64;
        let sx = self.x0 + (u as f64 + 0.5) * step - 0.5;
        let sy = self.y0 + (v as f64 + 0.5) * step - 0.5;
        let (fx, fy) = (sx.floor(), sy.floor());
        let (ax, ay) = (sx - fx, sy - fy);
        for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
            for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
                let (x, y) = (fx as i64 + dx, fy as i64 + dy);
                let wgt = wx * wy;
                if wgt != 0.0 && x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    out.push((x as usize, y as usize, wgt));
                }
            }
        }
    }

    /// Bilinear crop-and-resize to `n x n`. Taps outside the image contribute `fill`.
    pub fn resample(&self, img: &ImageBuffer, n: usize, fill: &[f64]) -> ImageBuffer {
        let c = img.channels();
        let mut out = ImageBuffer::new(n, n, c);
        let mut taps = Vec::with_capacity(4);
        for v in 0..n {
            for u in 0..n {
                self.taps(u, v, n, img.width(), img.height(), &mut taps);
                let covered: f64 = taps.iter().map(|t| t.2).sum();
                let px = out.pixel_mut(u, v);
                for k in 0..c {
                    px[k] = fill.get(k).copied().unwrap_or(0.0) * (1.0 - covered);
                }
                for &(x, y, wgt) in &taps {
                    for (k, p) in px.iter_mut().enumerate() {
                        *p += wgt * img.get(x, y, k);
                    }
                }
            }
        }
        out
    }

    /// Adjoint of the linear part of [`resample`](Self::resample): scatters an
    /// `n x n` gradient back onto a `w x h` image; pixels outside the window get zero.
    pub fn resample_adjoint(&self, grad: &ImageBuffer, w: usize, h: usize) -> ImageBuffer {
        let n = grad.width();
        let c = grad.channels();
        let mut out = ImageBuffer::new(w, h, c);
        let mut taps = Vec::with_capacity(4);
        for v in 0..n {
            for u in 0..n {
                self.taps(u, v, n, w, h, &mut taps);
                for &(x, y, wgt) in &taps {
                    for k in 0..c {
                        let i = out.index(x, y, k);
                        out.data_mut()[i] += wgt * grad.get(u, v, k);
                    }
                }
            }
        }
        out
    }
}
