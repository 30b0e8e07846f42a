//! Activation maps, person masks and GeM pooling.

use crate::tensor::{FeatureMap, PersonDescriptor, SpatialMap};

/// Below this spread a map is treated as constant by [`minmax_normalize`].
pub const MINMAX_EPS: f64 = 1e-12;

/// Activations are floored here before the fractional power in [`gem_pool`].
pub const GEM_FLOOR: f64 = 1e-6;

pub const DEFAULT_GEM_POWER: f64 = 3.0;

/// Per-position L2 norm of the channel vector.
pub fn activation_map(f: &FeatureMap) -> SpatialMap {
    let data = row_norms(f.data(), f.channels());
    SpatialMap::from_parts(f.height(), f.width(), data)
}

/// Rescales to `[0, 1]` by the map's own extrema.
///
/// A map whose spread is below [`MINMAX_EPS`] is returned clamped to `[0, 1]`.
pub fn minmax_normalize(g: &SpatialMap) -> SpatialMap {
    SpatialMap::from_parts(g.height(), g.width(), minmax_slice(g.data()))
}

pub fn person_mask(f: &FeatureMap) -> SpatialMap {
    minmax_normalize(&activation_map(f))
}

/// Per-channel generalized mean over all positions.
pub fn gem_pool(f: &FeatureMap, p_gem: f64) -> PersonDescriptor {
    PersonDescriptor(gem_slice(f.data(), f.positions(), f.channels(), p_gem))
}

pub(crate) fn row_norms(data: &[f64], d: usize) -> Vec<f64> {
    data.chunks_exact(d)
        .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Returns `(min, argmin, max, argmax)`, first attaining index on ties.
pub(crate) fn extrema(x: &[f64]) -> (f64, usize, f64, usize) {
    let (mut lo, mut lo_i, mut hi, mut hi_i) = (x[0], 0, x[0], 0);
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v < lo {
            lo = v;
            lo_i = i;
        }
        if v > hi {
            hi = v;
            hi_i = i;
        }
    }
    (lo, lo_i, hi, hi_i)
}

pub(crate) fn minmax_slice(x: &[f64]) -> Vec<f64> {
    let (lo, _, hi, _) = extrema(x);
    let span = hi - lo;
    if span < MINMAX_EPS {
        x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        x.iter().map(|v| (v - lo) / span).collect()
    }
}

/// `data` is `positions × channels`, position-major.
pub(crate) fn gem_slice(data: &[f64], positions: usize, channels: usize, p_gem: f64) -> Vec<f64> {
    let mut acc = vec![0.0; channels];
    for row in data.chunks_exact(channels) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.max(GEM_FLOOR).powf(p_gem);
        }
    }
    let inv = 1.0 / positions as f64;
    acc.iter().map(|a| (a * inv).powf(1.0 / p_gem)).collect()
}
