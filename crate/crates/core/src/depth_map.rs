//! Dense depth grids with a validity mask and the bilinear sampling operator
//! used to read network depth at subpixel keypoint locations.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum DepthMapError {
    #[error("pixel ({u}, {v}) is outside the {width}x{height} map")]
    OutOfBounds { u: f64, v: f64, width: usize, height: usize },
    #[error("depth map buffer has {len} values, expected {expected}")]
    BadBufferLength { len: usize, expected: usize },
}

/// Row-major depth grid. A pixel is usable when its mask bit is set; valid
/// pixels are expected to hold finite positive depths.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Builds a map from row-major values. Non-finite or non-positive
    /// entries are marked invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self, DepthMapError> {
        if values.len() != width * height {
            return Err(DepthMapError::BadBufferLength { len: values.len(), expected: width * height });
        }
        let valid = values.iter().map(|&d| d.is_finite() && d > 0.0).collect();
        Ok(Self { width, height, values, valid })
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        Self::from_values(width, height, vec![depth; width * height]).expect("sizes agree")
    }

    /// Builds a map from a per-pixel function of `(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::from_values(width, height, values).expect("sizes agree")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Stores a depth and sets validity from its value.
    pub fn set(&mut self, x: usize, y: usize, depth: f64) {
        let i = y * self.width + x;
        self.values[i] = depth;
        self.valid[i] = depth.is_finite() && depth > 0.0;
    }

    pub fn invalidate(&mut self, x: usize, y: usize) {
        self.valid[y * self.width + x] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Multiplies every depth by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.values {
            *v *= k;
        }
        for (m, v) in out.valid.iter_mut().zip(&out.values) {
            *m = *m && v.is_finite() && *v > 0.0;
        }
        out
    }

    /// The four bilinear taps `(index, weight)` for a subpixel location.
    ///
    /// The right/bottom neighbour is clamped at the last column/row, where its
    /// weight is zero anyway.
    pub fn bilinear_taps(&self, u: f64, v: f64) -> Result<[(usize, f64); 4], DepthMapError> {
        let in_range = u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64;
        if self.width == 0 || self.height == 0 || !in_range {
            return Err(DepthMapError::OutOfBounds { u, v, width: self.width, height: self.height });
        }
        let x0 = libm::floor(u) as usize;
        let y0 = libm::floor(v) as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let w = self.width;
        Ok([
            (y0 * w + x0, (1.0 - ax) * (1.0 - ay)),
            (y0 * w + x1, ax * (1.0 - ay)),
            (y1 * w + x0, (1.0 - ax) * ay),
            (y1 * w + x1, ax * ay),
        ])
    }

    /// Bilinear depth at a subpixel location.
    ///
    /// Returns `Ok(None)` when a neighbour with non-zero weight is masked
    /// invalid.
    pub fn sample(&self, u: f64, v: f64) -> Result<Option<f64>, DepthMapError> {
        let taps = self.bilinear_taps(u, v)?;
        let mut acc = 0.0;
        for (i, w) in taps {
            if w == 0.0 {
                continue;
            }
            if !self.valid[i] {
                return Ok(None);
            }
            acc += w * self.values[i];
        }
        Ok(Some(acc))
    }

    /// Bilinear resize to `(width, height)` with align-corners sampling, so
    /// corner pixels map onto corner pixels.
    ///
    /// Output pixels whose source neighbourhood touches an invalid pixel are
    /// invalid.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = if width > 1 { (self.width - 1) as f64 / (width - 1) as f64 } else { 0.0 };
        let sy = if height > 1 { (self.height - 1) as f64 / (height - 1) as f64 } else { 0.0 };
        let mut values = Vec::with_capacity(width * height);
        let mut valid = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                match self.sample(x as f64 * sx, y as f64 * sy) {
                    Ok(Some(d)) => {
                        values.push(d);
                        valid.push(d.is_finite() && d > 0.0);
                    }
                    _ => {
                        values.push(0.0);
                        valid.push(false);
                    }
                }
            }
        }
        Self { width, height, values, valid }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_samples_constant() {
        let m = DepthMap::filled(5, 4, 7.0);
        for &(u, v) in &[(0.0, 0.0), (1.3, 2.7), (3.99, 0.5), (4.0, 3.0)] {
            assert_eq!(m.sample(u, v).unwrap(), Some(7.0));
        }
    }

    #[test]
    fn midpoint_of_two_pixels() {
        let m = DepthMap::from_values(2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(m.sample(0.5, 0.0).unwrap(), Some(3.0));
    }

    #[test]
    fn grid_nodes_return_stored_values() {
        let m = DepthMap::from_fn(4, 3, |x, y| 1.0 + x as f64 + 10.0 * y as f64);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(m.sample(x as f64, y as f64).unwrap(), Some(m.get(x, y)));
            }
        }
    }

    #[test]
    fn out_of_bounds_is_an_error() {
        let m = DepthMap::filled(4, 4, 1.0);
        assert!(matches!(m.sample(3.5, 1.0), Err(DepthMapError::OutOfBounds { .. })));
        assert!(matches!(m.sample(-0.1, 1.0), Err(DepthMapError::OutOfBounds { .. })));
    }

    #[test]
    fn invalid_neighbour_poisons_sample() {
        let mut m = DepthMap::filled(3, 3, 2.0);
        m.invalidate(1, 1);
        assert_eq!(m.sample(0.5, 0.5).unwrap(), None);
        // zero-weight neighbour does not matter
        assert_eq!(m.sample(0.0, 0.0).unwrap(), Some(2.0));
    }

    #[test]
    fn resize_keeps_corners_and_linear_ramps() {
        let m = DepthMap::from_fn(3, 3, |x, y| 1.0 + x as f64 + 2.0 * y as f64);
        let r = m.resized(5, 5);
        assert_eq!(r.get(0, 0), 1.0);
        assert_eq!(r.get(4, 4), 7.0);
        assert!((r.get(1, 0) - 1.5).abs() < 1e-12);
        assert!((r.get(2, 3) - (1.0 + 1.0 + 2.0 * 1.5)).abs() < 1e-12);
    }
}
