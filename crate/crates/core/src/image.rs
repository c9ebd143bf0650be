use crate::error::{Error, Result};

/// Row-major `height x width x channels` float image.
///
/// Colors, gating maps and splatted weight planes all share this type; a
/// plane is just a one-channel buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::input(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    /// Copies channel `c` out as a one-channel image.
    pub fn plane(&self, c: usize) -> ImageBuffer {
        assert!(c < self.channels, "channel {c} out of range");
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Stacks one-channel (or multi-channel) images along the channel axis.
    pub fn stack(parts: &[&ImageBuffer]) -> Result<ImageBuffer> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("cannot stack zero images"))?;
        let (h, w) = (first.height, first.width);
        if parts.iter().any(|p| p.height != h || p.width != w) {
            return Err(Error::input("stacked images differ in resolution"));
        }
        let channels: usize = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for px in 0..h * w {
            for part in parts {
                data.extend_from_slice(part.pixel(px));
            }
        }
        Ok(ImageBuffer {
            height: h,
            width: w,
            channels,
            data,
        })
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::input(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Multiplies every channel of each pixel by the matching value of a
    /// one-channel mask.
    pub fn mul_plane(&self, mask: &ImageBuffer) -> Result<ImageBuffer> {
        if mask.channels != 1 || mask.height != self.height || mask.width != self.width {
            return Err(Error::input("mask must be a one-channel plane of equal resolution"));
        }
        let mut out = self.clone();
        for p in 0..self.pixel_count() {
            let m = mask.data[p];
            for v in out.pixel_mut(p) {
                *v *= m;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ImageBuffer) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

impl ImageBuffer {
    /// Computes `a * self + b * other` elementwise.
    pub fn axpby(&self, a: f64, other: &ImageBuffer, b: f64) -> ImageBuffer {
        assert!(self.same_shape(other));
        ImageBuffer {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_plane_roundtrip() {
        let a = ImageBuffer::from_fn(2, 3, 1, |y, x, _| (y * 3 + x) as f64);
        let b = a.map(|v| v * 10.0);
        let s = ImageBuffer::stack(&[&a, &b]).unwrap();
        assert_eq!(s.channels(), 2);
        assert_eq!(s.plane(0), a);
        assert_eq!(s.plane(1), b);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(ImageBuffer::from_vec(2, 2, 3, vec![0.0; 11]).is_err());
    }

    #[test]
    fn mul_plane_rejects_multichannel_mask() {
        let img = ImageBuffer::zeros(2, 2, 3);
        assert!(img.mul_plane(&img).is_err());
    }
}
