//! Per-voxel input features.
//!
//! | index | feature                                           |
//! |-------|---------------------------------------------------|
//! | 0     | intensity                                         |
//! | 1     | mean over the 3×3×3 neighbourhood                 |
//! | 2     | standard deviation over the 3×3×3 neighbourhood   |
//! | 3     | gradient magnitude (central differences)          |
//! | 4..7  | normalized (x, y, z) in [0, 1]                    |
//!
//! Neighbourhoods clamp indices at the volume border.

use crate::volume::Volume3D;

pub const N_FEATURES: usize = 7;

pub const FEATURE_NAMES: [&str; N_FEATURES] = ["intensity", "local_mean", "local_std", "gradient", "x", "y", "z"];

/// Row-major `n_voxels × N_FEATURES` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArray {
    data: Vec<f32>,
}

impl FeatureArray {
    pub fn with_capacity(n_voxels: usize) -> Self {
        Self {
            data: Vec::with_capacity(n_voxels * N_FEATURES),
        }
    }

    pub fn from_rows(data: Vec<f32>) -> Self {
        assert_eq!(data.len() % N_FEATURES, 0);
        Self { data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / N_FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, voxel: usize) -> &[f32] {
        &self.data[voxel * N_FEATURES..(voxel + 1) * N_FEATURES]
    }

    pub fn push(&mut self, row: &[f32; N_FEATURES]) {
        self.data.extend_from_slice(row);
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Features of every voxel, in storage order.
pub fn extract_features(x: &Volume3D) -> FeatureArray {
    let n = x.data().len();
    let mut out = FeatureArray::with_capacity(n);
    for i in 0..n {
        out.push(&features_at(x, i));
    }
    out
}

/// Features of the listed voxels, in the given order.
pub fn extract_features_at(x: &Volume3D, voxels: &[usize]) -> FeatureArray {
    let mut out = FeatureArray::with_capacity(voxels.len());
    for &i in voxels {
        out.push(&features_at(x, i));
    }
    out
}

/// Rewrites a feature row as if the image had been mapped through
/// `v ↦ scale·v + shift`: intensity and local mean follow the map, local
/// std and gradient scale by `|scale|`, coordinates are unchanged.
pub fn apply_intensity_affine(row: &mut [f32], scale: f32, shift: f32) {
    row[0] = row[0] * scale + shift;
    row[1] = row[1] * scale + shift;
    row[2] *= scale.abs();
    row[3] *= scale.abs();
}

pub fn features_at(x: &Volume3D, index: usize) -> [f32; N_FEATURES] {
    let g = x.geometry();
    let dims = g.dims();
    let [cx, cy, cz] = g.coords(index);
    let data = x.data();
    let clamp = |v: usize, d: isize, n: usize| (v as isize + d).clamp(0, n as isize - 1) as usize;
    let at = |px: usize, py: usize, pz: usize| data[g.index(px, py, pz)] as f64;

    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for dz in -1..=1 {
        let z = clamp(cz, dz, dims[2]);
        for dy in -1..=1 {
            let y = clamp(cy, dy, dims[1]);
            for dx in -1..=1 {
                let v = at(clamp(cx, dx, dims[0]), y, z);
                sum += v;
                sum_sq += v * v;
            }
        }
    }
    let mean = sum / 27.0;
    let var = (sum_sq / 27.0 - mean * mean).max(0.0);

    let gx = (at(clamp(cx, 1, dims[0]), cy, cz) - at(clamp(cx, -1, dims[0]), cy, cz)) / 2.0;
    let gy = (at(cx, clamp(cy, 1, dims[1]), cz) - at(cx, clamp(cy, -1, dims[1]), cz)) / 2.0;
    let gz = (at(cx, cy, clamp(cz, 1, dims[2])) - at(cx, cy, clamp(cz, -1, dims[2]))) / 2.0;

    let norm = |v: usize, n: usize| if n > 1 { v as f32 / (n - 1) as f32 } else { 0.0 };
    [
        data[index],
        mean as f32,
        var.sqrt() as f32,
        (gx * gx + gy * gy + gz * gz).sqrt() as f32,
        norm(cx, dims[0]),
        norm(cy, dims[1]),
        norm(cz, dims[2]),
    ]
}
