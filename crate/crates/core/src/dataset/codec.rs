use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};
use crate::scene::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    /// 3 channels in `[0, 1]`.
    Rgb,
    /// 1 channel, binarized at 0.5.
    Mask,
    /// 3 channels in `[-1, 1]`, stored as `(n + 1) / 2`.
    Normal,
    /// 1 channel in `[0, 1]`.
    Visibility,
}

impl ImageKind {
    pub fn channels(self) -> usize {
        match self {
            ImageKind::Rgb | ImageKind::Normal => 3,
            ImageKind::Mask | ImageKind::Visibility => 1,
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_bytes(img: &ImageBuffer, kind: ImageKind) -> Result<Vec<u8>> {
    if img.channels() != kind.channels() {
        return Err(Error::shape(format!("{} channels for {kind:?}", kind.channels()), img.channels()));
    }
    Ok(img
        .data()
        .iter()
        .map(|&v| match kind {
            ImageKind::Rgb | ImageKind::Visibility => quantize(v),
            ImageKind::Mask => {
                if v >= 0.5 {
                    255
                } else {
                    0
                }
            }
            ImageKind::Normal => quantize((v + 1.0) * 0.5),
        })
        .collect())
}

pub fn decode_bytes(bytes: &[u8], width: usize, height: usize, kind: ImageKind) -> Result<ImageBuffer> {
    let data = bytes
        .iter()
        .map(|&b| match kind {
            ImageKind::Rgb | ImageKind::Visibility => b as f64 / 255.0,
            ImageKind::Mask => {
                if b >= 128 {
                    1.0
                } else {
                    0.0
                }
            }
            ImageKind::Normal => b as f64 / 255.0 * 2.0 - 1.0,
        })
        .collect();
    ImageBuffer::from_vec(width, height, kind.channels(), data)
}

pub fn write_image(path: &Path, img: &ImageBuffer, kind: ImageKind) -> Result<()> {
    let bytes = encode_bytes(img, kind)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let res = match kind.channels() {
        3 => RgbImage::from_raw(w, h, bytes).expect("sized buffer").save(path),
        _ => GrayImage::from_raw(w, h, bytes).expect("sized buffer").save(path),
    };
    res.map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit PNG. Grayscale files may be read as RGB and vice versa
/// (RGB to one channel keeps the first channel); other bit depths are rejected.
pub fn read_image(path: &Path, kind: ImageKind) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bytes = match (&img, kind.channels()) {
        (DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_), 3) => img.to_rgb8().into_raw(),
        (DynamicImage::ImageLuma8(_), 3) => img.to_rgb8().into_raw(),
        (DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_), 1) => img.to_luma8().into_raw(),
        (DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_), 1) => {
            img.to_rgb8().into_raw().chunks_exact(3).map(|p| p[0]).collect()
        }
        (other, _) => {
            return Err(Error::format(path, format!("unsupported pixel format {:?}, expected 8-bit", other.color())))
        }
    };
    decode_bytes(&bytes, w, h, kind)
}
