//! Dense image buffers used by the feature extractor, the renderer and the
//! photometric optimizer. Values live in `[0, 1]` for color data; depth maps
//! reuse the same container with one channel and meters as the unit.

use crate::math::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<Real>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<Real>) -> Self {
        assert_eq!(data.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> Real,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(x, y, c, f(x, y, c));
                }
            }
        }
        img
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

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> Real {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: Real) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, c: usize, value: Real) {
        self.data[(y * self.width + x) * self.channels + c] += value;
    }

    /// Sample with coordinates clamped to the image rectangle.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize, c: usize) -> Real {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Bilinear sample at sub-pixel coordinates (pixel centers at integers).
    pub fn sample_bilinear(&self, x: Real, y: Real, c: usize) -> Real {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.get_clamped(xi, yi, c);
        let v10 = self.get_clamped(xi + 1, yi, c);
        let v01 = self.get_clamped(xi, yi + 1, c);
        let v11 = self.get_clamped(xi + 1, yi + 1, c);
        v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy
    }

    /// Rec. 601 luma of a color image; identity for single-channel input.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        assert_eq!(self.channels, 3);
        Image::from_fn(self.width, self.height, 1, |x, y, _| {
            0.299 * self.get(x, y, 0) + 0.587 * self.get(x, y, 1) + 0.114 * self.get(x, y, 2)
        })
    }

    /// Separable 5x5 binomial blur ([1 4 6 4 1] / 16) with clamped borders.
    pub fn blur5(&self) -> Image {
        const K: [Real; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut horiz = Image::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (i, k) in K.iter().enumerate() {
                        acc += k * self.get_clamped(x as isize + i as isize - 2, y as isize, c);
                    }
                    horiz.set(x, y, c, acc);
                }
            }
        }
        let mut out = Image::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    let mut acc = 0.0;
                    for (i, k) in K.iter().enumerate() {
                        acc += k * horiz.get_clamped(x as isize, y as isize + i as isize - 2, c);
                    }
                    out.set(x, y, c, acc);
                }
            }
        }
        out
    }

    /// Keep every second pixel starting at (0, 0); dimensions ceil-halve.
    pub fn decimate2(&self) -> Image {
        let w = self.width.div_ceil(2);
        let h = self.height.div_ceil(2);
        Image::from_fn(w, h, self.channels, |x, y, c| self.get(2 * x, 2 * y, c))
    }

    /// Bilinear resize to the given dimensions.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as Real / width as Real;
        let sy = self.height as Real / height as Real;
        Image::from_fn(width, height, self.channels, |x, y, c| {
            self.sample_bilinear(
                (x as Real + 0.5) * sx - 0.5,
                (y as Real + 0.5) * sy - 0.5,
                c,
            )
        })
    }

    pub fn mean(&self) -> Real {
        self.data.iter().sum::<Real>() / self.data.len() as Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn blur_preserves_constants() {
        let img = Image::from_fn(9, 7, 3, |_, _, _| 0.42);
        let blurred = img.blur5();
        for v in blurred.data() {
            assert_relative_eq!(*v, 0.42, epsilon = 1e-12);
        }
    }

    #[test]
    fn decimate_ceil_halves() {
        let img = Image::zeros(5, 4, 1);
        let half = img.decimate2();
        assert_eq!((half.width(), half.height()), (3, 2));
    }

    #[test]
    fn bilinear_interpolates_midpoint() {
        let mut img = Image::zeros(2, 1, 1);
        img.set(0, 0, 0, 0.0);
        img.set(1, 0, 0, 1.0);
        assert_relative_eq!(img.sample_bilinear(0.5, 0.0, 0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn gray_conversion_weights() {
        let mut img = Image::zeros(1, 1, 3);
        img.set(0, 0, 0, 1.0);
        let gray = img.to_gray();
        assert_relative_eq!(gray.get(0, 0, 0), 0.299, epsilon = 1e-12);
    }
}
