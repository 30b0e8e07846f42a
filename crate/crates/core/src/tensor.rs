//! Spatial feature containers.
//!
//! A [`FeatureMap`] is an `h × w × d` field stored position-major: the `d`
//! channel values of position `(row, col)` live contiguously at offset
//! `(row * w + col) * d`. A [`SpatialMap`] is the `d = 1` case used for
//! activation maps, person masks and co-attention maps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Config(format!(
                "feature map dimensions must be positive, got {h}x{w}x{d}"
            )));
        }
        if data.len() != h * w * d {
            return Err(Error::dim("FeatureMap::new", &[h, w, d], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "FeatureMap::new".into(),
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Self { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        assert!(h > 0 && w > 0 && d > 0, "feature map dimensions must be positive");
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn from_fn(h: usize, w: usize, d: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(h, w, d);
        for r in 0..h {
            for c in 0..w {
                for k in 0..d {
                    out.data[(r * w + c) * d + k] = f(r, c, k);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    /// Number of spatial positions, `h * w`.
    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Channel vector at flat position index `p = row * w + col`.
    pub fn at(&self, p: usize) -> &[f64] {
        &self.data[p * self.d..(p + 1) * self.d]
    }

    pub fn at_mut(&mut self, p: usize) -> &mut [f64] {
        let d = self.d;
        &mut self.data[p * d..(p + 1) * d]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.w + col) * self.d + ch]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &FeatureMap, op: &'static str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::dim(op, &self.shape(), &other.shape()))
        }
    }

    /// Elementwise `a * self + b * other`.
    pub fn lin_comb(&self, a: f64, other: &FeatureMap, b: f64) -> Result<FeatureMap> {
        self.check_same_shape(other, "lin_comb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(FeatureMap { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> FeatureMap {
        FeatureMap {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "spatial map dimensions must be positive, got {h}x{w}"
            )));
        }
        if data.len() != h * w {
            return Err(Error::dim("SpatialMap::new", &[h, w], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "SpatialMap::new".into(),
                detail: "non-finite value".into(),
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0, "spatial map dimensions must be positive");
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.h, self.w]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// View as a single-channel feature map so it can be soft-warped.
    pub fn to_feature_map(&self) -> FeatureMap {
        FeatureMap {
            h: self.h,
            w: self.w,
            d: 1,
            data: self.data.clone(),
        }
    }

    pub(crate) fn from_parts(h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }
}

/// Image-level representation produced by spatial pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonDescriptor(pub Vec<f64>);

impl PersonDescriptor {
    pub fn channels(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &PersonDescriptor) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        let na = self.0.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let nb = other.0.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        dot / (na * nb)
    }

    pub fn euclidean(&self, other: &PersonDescriptor) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl FeatureMap {
    pub(crate) fn from_parts(h: usize, w: usize, d: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), h * w * d);
        Self { h, w, d, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(FeatureMap::new(0, 2, 2, vec![]).is_err());
        assert!(FeatureMap::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(FeatureMap::new(1, 1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(SpatialMap::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn position_major_layout() {
        let f = FeatureMap::from_fn(2, 3, 2, |r, c, k| (r * 100 + c * 10 + k) as f64);
        assert_eq!(f.at(4), &[110.0, 111.0]);
        assert_eq!(f.get(1, 2, 1), 121.0);
    }
}
