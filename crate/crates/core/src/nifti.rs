//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.
//!
//! Reading accepts uint8, int16, int32, float32 and float64 voxels in either
//! byte order and converts them to `f32`, honouring `scl_slope`/`scl_inter`.
//! The affine comes from the sform when `sform_code > 0`, otherwise from the
//! qform quaternion when `qform_code > 0`, otherwise from pixdim alone.
//!
//! Writing always produces little-endian files with a 352-byte prefix
//! (header plus an empty extension block), `sform_code = 1`,
//! `qform_code = 0`, and mm units. Images are stored as float32 and masks as
//! uint8 `{0, 1}`. Gzip output (selected by a `.gz` suffix) has a zeroed
//! timestamp so identical inputs give identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, Geometry, TractChannel, TractLabelMap, Volume3D};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

/// Voxel encodings this module understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Datatype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Datatype::U8,
            4 => Datatype::I16,
            8 => Datatype::I32,
            16 => Datatype::F32,
            64 => Datatype::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
            Datatype::F64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
            Datatype::F64 => 8,
        }
    }
}

/// Anything that can be written as a NIfTI-1 image.
pub trait NiftiEncode {
    fn geometry(&self) -> &Geometry;
    fn datatype(&self) -> Datatype;
    fn encode_voxels(&self, out: &mut Vec<u8>);
}

impl NiftiEncode for Volume3D {
    fn geometry(&self) -> &Geometry {
        Volume3D::geometry(self)
    }
    fn datatype(&self) -> Datatype {
        Datatype::F32
    }
    fn encode_voxels(&self, out: &mut Vec<u8>) {
        for v in self.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl NiftiEncode for BinaryMask3D {
    fn geometry(&self) -> &Geometry {
        BinaryMask3D::geometry(self)
    }
    fn datatype(&self) -> Datatype {
        Datatype::U8
    }
    fn encode_voxels(&self, out: &mut Vec<u8>) {
        out.extend(self.data().iter().map(|&b| b as u8));
    }
}

/// Serializes `x` to uncompressed NIfTI-1 bytes.
pub fn encode<T: NiftiEncode + ?Sized>(x: &T) -> Vec<u8> {
    let g = x.geometry();
    let dt = x.datatype();
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_i32 = |h: &mut [u8], off: usize, v: i32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r';
    let dims = g.dims();
    let mut dim = [1i16; 8];
    dim[0] = 3;
    for axis in 0..3 {
        dim[axis + 1] = i16::try_from(dims[axis]).expect("dimension exceeds NIfTI-1 limit");
    }
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, dt.code());
    put_i16(&mut h, 72, (dt.size() * 8) as i16);
    let mut pixdim = [1.0f32; 8];
    pixdim[1..4].copy_from_slice(&g.spacing());
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    // xyzt_units: mm
    h[123] = 2;
    put_i16(&mut h, 252, 0);
    put_i16(&mut h, 254, 1);
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        for c in 0..4 {
            put_f32(&mut h, off + 4 * c, g.affine()[row][c]);
        }
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    // bytes 348..352: empty extension flag

    h.reserve(g.len() * dt.size());
    x.encode_voxels(&mut h);
    h
}

/// Writes `x` to `path`, gzip-compressed if the path ends in `.gz`.
pub fn write_volume<T: NiftiEncode + ?Sized>(x: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw = encode(x);
    let bytes = if is_gz_path(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        raw
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn is_gz_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Reads a 3D image, converting voxels to `f32`.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Reads a mask; voxels `>= 0.5` are foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask3D> {
    let v = read_volume(path)?;
    let geometry = v.geometry().clone();
    BinaryMask3D::from_vec(geometry, v.data().iter().map(|&x| x >= 0.5).collect())
}

/// Decodes NIfTI-1 bytes (optionally gzip-wrapped). `origin` is only used in
/// error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Volume3D> {
    let owned;
    let bytes = if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| Error::io(origin, e))?;
        owned = out;
        &owned[..]
    } else {
        bytes
    };
    let path = || origin.to_path_buf();
    if bytes.len() < HEADER_SIZE {
        return Err(Error::BadHeader {
            path: path(),
            reason: format!("file holds {} bytes, header needs {HEADER_SIZE}", bytes.len()),
        });
    }
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic != MAGIC_SINGLE {
        return Err(Error::BadMagic { path: path(), found: magic });
    }
    let little = match (
        i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
        i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
    ) {
        (348, _) => true,
        (_, 348) => false,
        _ => {
            return Err(Error::BadHeader {
                path: path(),
                reason: "sizeof_hdr is not 348".into(),
            })
        }
    };
    let r = HeaderReader { bytes, little };

    let dim: Vec<i16> = (0..8).map(|i| r.i16(40 + 2 * i)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(Error::BadHeader {
            path: path(),
            reason: format!("dim[0] = {ndim}"),
        });
    }
    let extra_axes = &dim[4..=ndim.max(3) as usize];
    if ndim < 3 || extra_axes.iter().any(|&d| d != 1) {
        return Err(Error::NotThreeDimensional {
            path: path(),
            dims: dim[..=ndim as usize].to_vec(),
        });
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::BadHeader {
            path: path(),
            reason: format!("non-positive dimension in {:?}", &dim[1..4]),
        });
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let code = r.i16(70);
    let dt = Datatype::from_code(code).ok_or(Error::UnsupportedDatatype { path: path(), code })?;

    let pixdim: Vec<f32> = (0..8).map(|i| r.f32(76 + 4 * i)).collect();
    let mut spacing = [1.0f32; 3];
    for axis in 0..3 {
        let p = pixdim[axis + 1].abs();
        spacing[axis] = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }

    let affine = if r.i16(254) > 0 {
        let mut a = [[0.0f32; 4]; 4];
        for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
            for (c, v) in a[row].iter_mut().enumerate() {
                *v = r.f32(off + 4 * c);
            }
        }
        a[3][3] = 1.0;
        a
    } else if r.i16(252) > 0 {
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        quaternion_affine(
            [r.f32(256), r.f32(260), r.f32(264)],
            [r.f32(268), r.f32(272), r.f32(276)],
            spacing,
            qfac,
        )
    } else {
        let mut a = [[0.0f32; 4]; 4];
        for axis in 0..3 {
            a[axis][axis] = spacing[axis];
        }
        a[3][3] = 1.0;
        a
    };
    let geometry = Geometry::with_affine(dims, spacing, affine).map_err(|e| Error::BadHeader {
        path: path(),
        reason: e.to_string(),
    })?;

    let vox_offset = r.f32(108);
    let offset = if vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32 {
        vox_offset as usize
    } else {
        VOX_OFFSET
    };
    let expected = geometry.len() * dt.size();
    let available = bytes.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::Truncated {
            path: path(),
            expected,
            found: available,
        });
    }
    let raw = &bytes[offset..offset + expected];
    let vr = HeaderReader { bytes: raw, little };
    let mut data: Vec<f32> = match dt {
        Datatype::U8 => raw.iter().map(|&b| b as f32).collect(),
        Datatype::I16 => (0..geometry.len()).map(|i| vr.i16(2 * i) as f32).collect(),
        Datatype::I32 => (0..geometry.len()).map(|i| vr.i32(4 * i) as f32).collect(),
        Datatype::F32 => (0..geometry.len()).map(|i| vr.f32(4 * i)).collect(),
        Datatype::F64 => (0..geometry.len()).map(|i| vr.f64(8 * i) as f32).collect(),
    };
    let slope = r.f32(112);
    let inter = r.f32(116);
    if slope.is_finite() && slope != 0.0 && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume3D::from_vec(geometry, data).map_err(|e| Error::BadHeader {
        path: path(),
        reason: e.to_string(),
    })
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    little: bool,
}

impl HeaderReader<'_> {
    fn take<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        if !self.little {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.take(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.take(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.take(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.take(off))
    }
}

/// qform (method 2) affine from quaternion parameters.
fn quaternion_affine(bcd: [f32; 3], offset: [f32; 3], spacing: [f32; 3], qfac: f64) -> [[f32; 4]; 4] {
    let [b, c, d] = bcd.map(|v| v as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let rot = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let zoom = [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64 * qfac];
    let mut out = [[0.0f32; 4]; 4];
    for r in 0..3 {
        for col in 0..3 {
            out[r][col] = (rot[r][col] * zoom[col]) as f32;
        }
        out[r][3] = offset[r];
    }
    out[3][3] = 1.0;
    out
}

/// File name used for a tract channel inside a label directory.
pub fn label_file_name(tract: &str) -> String {
    format!("{tract}.nii.gz")
}

/// Writes one file per channel into `dir` (created if missing) and returns the
/// written `(tract, path)` pairs in channel order.
pub fn write_label_map(labels: &TractLabelMap, dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    labels
        .channels()
        .iter()
        .map(|c| {
            let path = dir.join(label_file_name(&c.name));
            write_volume(&c.mask, &path)?;
            Ok((c.name.clone(), path))
        })
        .collect()
}

/// Reads the given `(tract, path)` channels into a label map.
pub fn read_label_map<S: AsRef<str>, P: AsRef<Path>>(entries: &[(S, P)]) -> Result<TractLabelMap> {
    let channels = entries
        .iter()
        .map(|(name, path)| {
            Ok(TractChannel {
                name: name.as_ref().to_string(),
                mask: read_mask(path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TractLabelMap::new(channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume3D {
        let g = Geometry::new([4, 3, 2], [1.25, 1.25, 2.5]).unwrap();
        Volume3D::from_vec(g, (0..24).map(|i| (i as f32) * 0.37 - 3.0).collect()).unwrap()
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let a = dir.path().join("v.nii");
        let b = dir.path().join("v.nii.gz");
        write_volume(&v, &a).unwrap();
        write_volume(&v, &b).unwrap();
        let ra = read_volume(&a).unwrap();
        let rb = read_volume(&b).unwrap();
        assert_eq!(ra, v);
        assert_eq!(ra, rb);
        assert_eq!(ra.geometry().spacing(), [1.25, 1.25, 2.5]);
    }

    #[test]
    fn mask_round_trip_counts() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::cube(4);
        let mut m = BinaryMask3D::empty(g);
        for (x, y, z) in [(0, 0, 0), (1, 2, 3), (3, 3, 3), (2, 0, 1), (0, 3, 2)] {
            m.set(x, y, z, true);
        }
        let p = dir.path().join("m.nii.gz");
        write_volume(&m, &p).unwrap();
        let v = read_volume(&p).unwrap();
        assert_eq!(v.data().iter().filter(|&&x| x == 1.0).count(), 5);
        assert_eq!(read_mask(&p).unwrap(), m);
    }

    #[test]
    fn encoder_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("a.nii.gz");
        let q = dir.path().join("b.nii.gz");
        write_volume(&v, &p).unwrap();
        write_volume(&v, &q).unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap());
    }

    fn patch_i16(bytes: &mut [u8], off: usize, v: i16) {
        bytes[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let v = sample_volume();
        let p = Path::new("mem.nii");
        let good = encode(&v);

        let mut bad_magic = good.clone();
        bad_magic[344] = b'x';
        assert!(matches!(decode(&bad_magic, p), Err(Error::BadMagic { .. })));

        let mut bad_type = good.clone();
        patch_i16(&mut bad_type, 70, 128);
        assert!(matches!(
            decode(&bad_type, p),
            Err(Error::UnsupportedDatatype { code: 128, .. })
        ));

        let mut flat = good.clone();
        patch_i16(&mut flat, 40, 2);
        assert!(matches!(decode(&flat, p), Err(Error::NotThreeDimensional { .. })));

        let mut four_d = good.clone();
        patch_i16(&mut four_d, 40, 4);
        patch_i16(&mut four_d, 48, 5);
        assert!(matches!(decode(&four_d, p), Err(Error::NotThreeDimensional { .. })));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(decode(truncated, p), Err(Error::Truncated { .. })));
    }

    #[test]
    fn reads_foreign_datatypes_and_scaling() {
        let g = Geometry::new([2, 2, 1], [2.0, 2.0, 2.0]).unwrap();
        let template = encode(&Volume3D::filled(g.clone(), 0.0));
        let header = &template[..VOX_OFFSET];
        let values: [i16; 4] = [-3, 0, 7, 300];

        let mut i16_file = header.to_vec();
        patch_i16(&mut i16_file, 70, 4);
        patch_i16(&mut i16_file, 72, 16);
        i16_file[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        i16_file[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        for v in values {
            i16_file.extend_from_slice(&v.to_le_bytes());
        }
        let out = decode(&i16_file, Path::new("i16.nii")).unwrap();
        assert_eq!(out.data(), &[-0.5, 1.0, 4.5, 151.0]);

        let mut f64_file = header.to_vec();
        patch_i16(&mut f64_file, 70, 64);
        patch_i16(&mut f64_file, 72, 64);
        for v in values {
            f64_file.extend_from_slice(&(v as f64 * 0.25).to_le_bytes());
        }
        let out = decode(&f64_file, Path::new("f64.nii")).unwrap();
        assert_eq!(out.data(), &[-0.75, 0.0, 1.75, 75.0]);
    }

    #[test]
    fn big_endian_input() {
        let v = sample_volume();
        let le = encode(&v);
        let mut be = le.clone();
        let swap = |b: &mut [u8], off: usize, n: usize| b[off..off + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, 40 + 2 * i, 2);
            swap(&mut be, 76 + 4 * i, 4);
        }
        for off in [70, 72, 252, 254] {
            swap(&mut be, off, 2);
        }
        for off in [108, 112, 116] {
            swap(&mut be, off, 4);
        }
        for off in (280..328).step_by(4) {
            swap(&mut be, off, 4);
        }
        for i in 0..24 {
            swap(&mut be, VOX_OFFSET + 4 * i, 4);
        }
        assert_eq!(decode(&be, Path::new("be.nii")).unwrap(), v);
    }

    #[test]
    fn qform_used_when_no_sform() {
        let v = sample_volume();
        let mut bytes = encode(&v);
        patch_i16(&mut bytes, 254, 0);
        patch_i16(&mut bytes, 252, 1);
        // 180° about z: b = c = 0, d = 1
        bytes[264..268].copy_from_slice(&1.0f32.to_le_bytes());
        bytes[268..272].copy_from_slice(&10.0f32.to_le_bytes());
        let out = decode(&bytes, Path::new("q.nii")).unwrap();
        let a = out.geometry().affine();
        assert_eq!(a[0][0], -1.25);
        assert_eq!(a[1][1], -1.25);
        assert_eq!(a[2][2], 2.5);
        assert_eq!(a[0][3], 10.0);
    }

    #[test]
    fn label_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = Geometry::cube(3);
        let labels = TractLabelMap::from_pairs([
            ("CST_left", BinaryMask3D::from_fn(g.clone(), |x, _, _| x == 0)),
            ("OR_right", BinaryMask3D::from_fn(g, |_, y, z| y == z)),
        ])
        .unwrap();
        let written = write_label_map(&labels, dir.path().join("labels")).unwrap();
        assert_eq!(read_label_map(&written).unwrap(), labels);
    }
}
