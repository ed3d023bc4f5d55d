use crate::error::{Error, Result};

/// Row-major `height x width x channels` grid of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, &vec![0.0; channels])
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let channels = value.len();
        assert!((1..=4).contains(&channels), "channels must be 1..=4");
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        ImageBuffer {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(1..=4).contains(&channels) {
            return Err(Error::validation(format!("channel count {channels} not in 1..=4")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{} values for {width}x{height}x{channels}", width * height * channels),
                format!("{} values", data.len()),
            ));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = self.index(x, y, 0);
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> Result<()> {
        if self.width != other.width || self.height != other.height || self.channels != other.channels
        {
            return Err(Error::shape(self.shape_string(), other.shape_string()));
        }
        Ok(())
    }

    /// Checks that a one-channel mask matches this image's spatial size.
    pub fn check_mask(&self, mask: &ImageBuffer) -> Result<()> {
        if mask.channels != 1 || mask.width != self.width || mask.height != self.height {
            return Err(Error::shape(
                format!("{}x{}x1 mask", self.width, self.height),
                mask.shape_string(),
            ));
        }
        Ok(())
    }

    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::validation(format!("non-finite value at element {i}"))),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn dot(&self, other: &ImageBuffer) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add_scaled(&mut self, other: &ImageBuffer, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Replaces pixels where `mask < 0.5` by `background`.
    pub fn masked(&self, mask: &ImageBuffer, background: &[f64]) -> Result<ImageBuffer> {
        self.check_mask(mask)?;
        let mut out = self.clone();
        for (p, &m) in mask.data.iter().enumerate() {
            if m < 0.5 {
                let i = p * self.channels;
                out.data[i..i + self.channels].copy_from_slice(&background[..self.channels]);
            }
        }
        Ok(out)
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageBuffer {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_interleaved() {
        let mut img = ImageBuffer::new(3, 2, 2);
        img.set(2, 1, 1, 7.0);
        assert_eq!(img.data()[(1 * 3 + 2) * 2 + 1], 7.0);
        assert_eq!(img.pixel(2, 1), &[0.0, 7.0]);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImageBuffer::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(ImageBuffer::from_vec(2, 2, 5, vec![0.0; 20]).is_err());
        assert!(ImageBuffer::from_vec(2, 2, 3, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn finite_check() {
        let mut img = ImageBuffer::new(2, 2, 1);
        assert!(img.validate_finite().is_ok());
        img.set(1, 1, 0, f64::NAN);
        assert!(img.validate_finite().is_err());
    }

    #[test]
    fn masking_sets_background() {
        let img = ImageBuffer::filled(2, 1, &[0.3, 0.4, 0.5]);
        let mask = ImageBuffer::from_vec(2, 1, 1, vec![1.0, 0.0]).unwrap();
        let m = img.masked(&mask, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.pixel(0, 0), &[0.3, 0.4, 0.5]);
        assert_eq!(m.pixel(1, 0), &[0.0, 0.0, 0.0]);
    }
}
