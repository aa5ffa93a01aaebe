//! Geometry-aware 3D containers.
//!
//! Voxel storage is row-major with x varying fastest: the linear index of
//! voxel `(x, y, z)` is `x + R_x * (y + R_y * z)`. File I/O, hashing and the
//! feature extractor all rely on this ordering.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Grid size, voxel spacing (mm) and voxel-to-world affine.
///
/// Spacing and affine are kept in single precision because that is what the
/// NIfTI-1 header stores; this keeps file round-trips bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry")]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f32; 3],
    affine: [[f32; 4]; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeometry {
    dims: [usize; 3],
    spacing: [f32; 3],
    affine: [[f32; 4]; 4],
}

impl TryFrom<RawGeometry> for Geometry {
    type Error = Error;
    fn try_from(raw: RawGeometry) -> Result<Self> {
        Geometry::with_affine(raw.dims, raw.spacing, raw.affine)
    }
}

impl Geometry {
    /// Axis-aligned geometry whose affine is `diag(spacing, 1)`.
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let mut affine = [[0.0; 4]; 4];
        for (axis, &s) in spacing.iter().enumerate() {
            affine[axis][axis] = s;
        }
        affine[3][3] = 1.0;
        Self::with_affine(dims, spacing, affine)
    }

    /// Isotropic 1 mm geometry.
    pub fn cube(size: usize) -> Self {
        Self::new([size; 3], [1.0; 3]).expect("cube geometry with size >= 1")
    }

    pub fn with_affine(dims: [usize; 3], spacing: [f32; 3], affine: [[f32; 4]; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        if affine.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("affine has non-finite entries".into()));
        }
        let m = |r: usize, c: usize| affine[r][c] as f64;
        let det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
            - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
            + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        if det.abs() < 1e-12 {
            return Err(Error::InvalidGeometry("affine rotation/zoom block is singular".into()));
        }
        Ok(Self {
            dims,
            spacing,
            affine,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &[[f32; 4]; 4] {
        &self.affine
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch {
                left: self.describe(),
                right: other.describe(),
            })
        }
    }

    pub fn describe(&self) -> String {
        let [x, y, z] = self.dims;
        let [sx, sy, sz] = self.spacing;
        format!("{x}x{y}x{z} @ ({sx}, {sy}, {sz}) mm")
    }

    fn write_canonical(&self, out: &mut Vec<u8>) {
        for d in self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for s in self.spacing {
            out.extend_from_slice(&s.to_bits().to_le_bytes());
        }
        for v in self.affine.iter().flatten() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

/// Scalar image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawVolume")]
pub struct Volume3D {
    geometry: Geometry,
    data: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVolume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl TryFrom<RawVolume> for Volume3D {
    type Error = Error;
    fn try_from(raw: RawVolume) -> Result<Self> {
        Volume3D::from_vec(raw.geometry, raw.data)
    }
}

impl Volume3D {
    pub fn from_vec(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Invalid(format!(
                "volume data length {} does not match {}",
                data.len(),
                geometry.describe()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite voxel value at index {i}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        assert!(value.is_finite());
        let data = vec![value; geometry.len()];
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }

    /// Applies `f` to every voxel. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        let data: Vec<f32> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced non-finite voxels");
        Self {
            geometry: self.geometry.clone(),
            data,
        }
    }
}

/// One bit per voxel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct BinaryMask3D {
    geometry: Geometry,
    data: Vec<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMask {
    geometry: Geometry,
    data: Vec<bool>,
}

impl TryFrom<RawMask> for BinaryMask3D {
    type Error = Error;
    fn try_from(raw: RawMask) -> Result<Self> {
        BinaryMask3D::from_vec(raw.geometry, raw.data)
    }
}

impl Eq for Geometry {}

impl BinaryMask3D {
    pub fn from_vec(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Invalid(format!(
                "mask data length {} does not match {}",
                data.len(),
                geometry.describe()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        let data = vec![false; geometry.len()];
        Self { geometry, data }
    }

    pub fn full(geometry: Geometry) -> Self {
        let data = vec![true; geometry.len()];
        Self { geometry, data }
    }

    /// Mask from a voxel predicate over `(x, y, z)`.
    pub fn from_fn(geometry: Geometry, f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let data = (0..geometry.len())
            .map(|i| {
                let [x, y, z] = geometry.coords(i);
                f(x, y, z)
            })
            .collect();
        Self { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: bool) {
        let i = self.geometry.index(x, y, z);
        self.data[i] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection_count(&self, other: &BinaryMask3D) -> Result<usize> {
        self.geometry.ensure_same(&other.geometry)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count())
    }

    /// `self AND NOT other`.
    pub fn minus(&self, other: &BinaryMask3D) -> Result<BinaryMask3D> {
        self.geometry.ensure_same(&other.geometry)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect();
        Ok(Self {
            geometry: self.geometry.clone(),
            data,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TractChannel {
    pub name: String,
    pub mask: BinaryMask3D,
}

/// Ordered, named binary channels sharing one geometry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabels")]
pub struct TractLabelMap {
    geometry: Geometry,
    channels: Vec<TractChannel>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLabels {
    geometry: Geometry,
    channels: Vec<TractChannel>,
}

impl TryFrom<RawLabels> for TractLabelMap {
    type Error = Error;
    fn try_from(raw: RawLabels) -> Result<Self> {
        let labels = TractLabelMap::new(raw.channels)?;
        labels.geometry.ensure_same(&raw.geometry)?;
        Ok(labels)
    }
}

impl TractLabelMap {
    pub fn new(channels: Vec<TractChannel>) -> Result<Self> {
        let first = channels.first().ok_or(Error::Empty("label map needs at least one channel"))?;
        let geometry = first.mask.geometry.clone();
        for (i, c) in channels.iter().enumerate() {
            geometry.ensure_same(&c.mask.geometry)?;
            if channels[..i].iter().any(|p| p.name == c.name) {
                return Err(Error::Invalid(format!("duplicate tract name {:?}", c.name)));
            }
        }
        Ok(Self { geometry, channels })
    }

    /// Convenience constructor from `(name, mask)` pairs.
    pub fn from_pairs<S: Into<String>>(pairs: impl IntoIterator<Item = (S, BinaryMask3D)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(name, mask)| TractChannel {
                    name: name.into(),
                    mask,
                })
                .collect(),
        )
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn channels(&self) -> &[TractChannel] {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|c| c.name.as_str())
    }

    pub fn mask(&self, channel: usize) -> &BinaryMask3D {
        &self.channels[channel].mask
    }

    pub fn by_name(&self, name: &str) -> Option<&BinaryMask3D> {
        self.channels.iter().find(|c| c.name == name).map(|c| &c.mask)
    }

    /// Same channel names in the same order and same geometry.
    pub fn ensure_aligned(&self, other: &TractLabelMap) -> Result<()> {
        self.geometry.ensure_same(&other.geometry)?;
        if !self.names().eq(other.names()) {
            return Err(Error::Invalid(format!(
                "channel mismatch: {:?} vs {:?}",
                self.names().collect::<Vec<_>>(),
                other.names().collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Applies `f` to every channel mask, keeping names.
    pub fn map_masks(&self, mut f: impl FnMut(&BinaryMask3D) -> BinaryMask3D) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| TractChannel {
                name: c.name.clone(),
                mask: f(&c.mask),
            })
            .collect();
        Self {
            geometry: self.geometry.clone(),
            channels,
        }
    }
}

/// Computes `x ⊙ (1 − m)`: voxels under the mask become exactly `0.0`, all
/// others are copied bit-for-bit.
pub fn voxelwise_mask_apply(x: &Volume3D, m: &BinaryMask3D) -> Result<Volume3D> {
    x.geometry.ensure_same(&m.geometry)?;
    let data = x
        .data
        .iter()
        .zip(&m.data)
        .map(|(&v, &masked)| if masked { 0.0 } else { v })
        .collect();
    Ok(Volume3D {
        geometry: x.geometry.clone(),
        data,
    })
}

/// Voxelwise OR of all masks.
///
/// For binary inputs this is the ceiling of the channel mean, computed
/// without the division.
pub fn mask_union<'a>(masks: impl IntoIterator<Item = &'a BinaryMask3D>) -> Result<BinaryMask3D> {
    let mut iter = masks.into_iter();
    let first = iter.next().ok_or(Error::Empty("mask_union needs at least one mask"))?;
    let mut out = first.clone();
    for m in iter {
        out.geometry.ensure_same(&m.geometry)?;
        for (o, &b) in out.data.iter_mut().zip(&m.data) {
            *o |= b;
        }
    }
    Ok(out)
}

/// Canonical little-endian serialization used for hashing and duplicate
/// detection. Independent of in-memory layout.
pub trait CanonicalBytes {
    fn write_canonical(&self, out: &mut Vec<u8>);

    /// First eight bytes of the SHA-256 of the canonical bytes.
    fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        self.write_canonical(&mut buf);
        hash_bytes(&buf)
    }
}

/// Hash of several objects serialized back to back.
pub fn content_hash_of(parts: &[&dyn CanonicalBytes]) -> u64 {
    let mut buf = Vec::new();
    for p in parts {
        p.write_canonical(&mut buf);
    }
    hash_bytes(&buf)
}

fn hash_bytes(buf: &[u8]) -> u64 {
    let digest = Sha256::digest(buf);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

impl CanonicalBytes for Volume3D {
    fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"VOL3");
        self.geometry.write_canonical(out);
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

impl CanonicalBytes for BinaryMask3D {
    fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"MSK3");
        self.geometry.write_canonical(out);
        out.extend(self.data.iter().map(|&b| b as u8));
    }
}

impl CanonicalBytes for TractLabelMap {
    fn write_canonical(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"LBL3");
        out.extend_from_slice(&(self.channels.len() as u64).to_le_bytes());
        for c in &self.channels {
            out.extend_from_slice(&(c.name.len() as u64).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            c.mask.write_canonical(out);
        }
    }
}
