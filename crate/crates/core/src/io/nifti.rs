//! Uncompressed single-file NIfTI-1 (`.nii`).
//!
//! NIfTI stores `dim[1]` as the fastest-varying axis. Our lattices are
//! row-major with the last axis fastest, so `dim[1..=3]` maps to lattice
//! axes `2, 1, 0`.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Volume3};

pub const HEADER_LEN: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiftiHeader {
    pub endian: Endian,
    /// Lattice dims in our axis order.
    pub dims: [usize; 3],
    pub datatype: i16,
    pub bitpix: i16,
    /// Spacing in our axis order.
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
    pub magic: [u8; 4],
}

impl NiftiHeader {
    pub fn datatype_name(&self) -> &'static str {
        match self.datatype {
            DT_UINT8 => "uint8",
            DT_INT16 => "int16",
            DT_FLOAT32 => "float32",
            DT_FLOAT64 => "float64",
            _ => "unknown",
        }
    }

    fn bytes_per_voxel(datatype: i16) -> Option<usize> {
        match datatype {
            DT_UINT8 => Some(1),
            DT_INT16 => Some(2),
            DT_FLOAT32 => Some(4),
            DT_FLOAT64 => Some(8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    Scalar(Volume3),
    Labels(LabelVolume),
}

impl NiftiData {
    pub fn dims(&self) -> Dims {
        match self {
            NiftiData::Scalar(v) => v.dims(),
            NiftiData::Labels(l) => l.dims(),
        }
    }

    pub fn into_volume(self) -> Volume3 {
        match self {
            NiftiData::Scalar(v) => v,
            NiftiData::Labels(l) => l.to_volume(),
        }
    }

    /// Label map view; scalar data must hold non-negative integers.
    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            NiftiData::Labels(l) => Ok(l),
            NiftiData::Scalar(v) => {
                let mut out = Vec::with_capacity(v.len());
                for &x in v.data() {
                    if x < 0.0 || x.fract() != 0.0 || x > u16::MAX as f64 {
                        return Err(Error::Unsupported(format!(
                            "value {x} is not a label"
                        )));
                    }
                    out.push(x as u16);
                }
                let mut l = LabelVolume::from_vec(v.dims(), out)?.with_spacing(v.spacing);
                l.origin = v.origin;
                Ok(l)
            }
        }
    }
}

/// Payload precision for scalar volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FloatWidth {
    F32,
    #[default]
    F64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => LittleEndian::read_i16(&self.bytes[off..]),
            Endian::Big => BigEndian::read_i16(&self.bytes[off..]),
        }
    }
    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => LittleEndian::read_f32(&self.bytes[off..]),
            Endian::Big => BigEndian::read_f32(&self.bytes[off..]),
        }
    }
    fn f64(&self, off: usize) -> f64 {
        match self.endian {
            Endian::Little => LittleEndian::read_f64(&self.bytes[off..]),
            Endian::Big => BigEndian::read_f64(&self.bytes[off..]),
        }
    }
}

pub fn parse_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len(),
            format!("file has {} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    let endian = if LittleEndian::read_i32(bytes) == HEADER_LEN as i32 {
        Endian::Little
    } else if BigEndian::read_i32(bytes) == HEADER_LEN as i32 {
        Endian::Big
    } else {
        return Err(Error::format(0, "sizeof_hdr is not 348 in either byte order"));
    };
    let r = Reader { bytes, endian };

    let mut magic = [0u8; 4];
    magic.copy_from_slice(&bytes[344..348]);
    if &magic == b"ni1\0" {
        return Err(Error::format(
            344,
            "two-file NIfTI (ni1) is not supported, expected n+1",
        ));
    }
    if &magic != b"n+1\0" {
        return Err(Error::format(344, format!("bad magic {magic:?}")));
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(40, format!("dim[0] = {ndim} out of range")));
    }
    let mut nd = [1usize; 7];
    for (a, slot) in nd.iter_mut().enumerate().take(ndim as usize) {
        let v = r.i16(42 + 2 * a);
        if v < 1 {
            return Err(Error::format(42 + 2 * a, format!("dim[{}] = {v}", a + 1)));
        }
        *slot = v as usize;
    }
    if nd[3..].iter().any(|&v| v != 1) {
        return Err(Error::Unsupported(format!(
            "only 3-D volumes are supported, got dims {:?}",
            &nd[..ndim as usize]
        )));
    }

    let datatype = r.i16(70);
    let bitpix = r.i16(72);
    let Some(bpv) = NiftiHeader::bytes_per_voxel(datatype) else {
        return Err(Error::format(70, format!("unsupported datatype code {datatype}")));
    };
    if bitpix as usize != 8 * bpv {
        return Err(Error::format(72, format!("bitpix {bitpix} does not match datatype {datatype}")));
    }

    let mut spacing = [1.0; 3];
    for a in 0..3 {
        let p = r.f32(80 + 4 * a) as f64;
        // pixdim[1] belongs to the fastest axis
        spacing[2 - a] = if p.is_finite() && p > 0.0 { p } else { 1.0 };
    }

    let vox = r.f32(108);
    if !vox.is_finite() || vox < HEADER_LEN as f32 || vox.fract() != 0.0 {
        return Err(Error::format(108, format!("invalid vox_offset {vox}")));
    }
    let scl_slope = r.f32(112) as f64;
    let scl_inter = r.f32(116) as f64;

    let sform = r.i16(254);
    let qform = r.i16(252);
    let mut origin = [0.0; 3];
    if sform > 0 {
        for a in 0..3 {
            origin[2 - a] = r.f32(280 + 16 * a + 12) as f64;
        }
    } else if qform > 0 {
        for a in 0..3 {
            origin[2 - a] = r.f32(268 + 4 * a) as f64;
        }
    }

    Ok(NiftiHeader {
        endian,
        dims: [nd[2], nd[1], nd[0]],
        datatype,
        bitpix,
        spacing,
        origin,
        scl_slope,
        scl_inter,
        vox_offset: vox as usize,
        magic,
    })
}

/// Parses a complete `.nii` image. `uint8` payloads are returned as labels,
/// everything else as a scalar volume with the intensity scaling applied.
pub fn read_nifti(bytes: &[u8]) -> Result<(NiftiData, NiftiHeader)> {
    let h = parse_header(bytes)?;
    let dims = Dims::new(h.dims[0], h.dims[1], h.dims[2])?;
    let n = dims.len();
    let bpv = NiftiHeader::bytes_per_voxel(h.datatype).expect("checked in header");
    let end = h.vox_offset + n * bpv;
    if bytes.len() < end {
        return Err(Error::format(
            bytes.len(),
            format!("payload truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let payload = &bytes[h.vox_offset..end];
    let r = Reader {
        bytes: payload,
        endian: h.endian,
    };
    let scaled = h.scl_slope != 0.0 && h.scl_slope.is_finite();
    if h.datatype == DT_UINT8 && (!scaled || (h.scl_slope == 1.0 && h.scl_inter == 0.0)) {
        let mut l = LabelVolume::from_vec(dims, payload.iter().map(|&b| b as u16).collect())?
            .with_spacing(h.spacing);
        l.origin = h.origin;
        return Ok((NiftiData::Labels(l), h));
    }
    let mut data = Vec::with_capacity(n);
    for v in 0..n {
        let x = match h.datatype {
            DT_UINT8 => payload[v] as f64,
            DT_INT16 => r.i16(2 * v) as f64,
            DT_FLOAT32 => r.f32(4 * v) as f64,
            _ => r.f64(8 * v),
        };
        data.push(if scaled { x * h.scl_slope + h.scl_inter } else { x });
    }
    let vol = Volume3::from_vec(dims, data)?
        .with_spacing(h.spacing)
        .map_err(|_| Error::format(80, "non-positive pixdim"))?
        .with_origin(h.origin);
    Ok((NiftiData::Scalar(vol), h))
}

pub fn read_nifti_file(path: &Path) -> Result<(NiftiData, NiftiHeader)> {
    let bytes = std::fs::read(path)?;
    read_nifti(&bytes)
}

fn header_bytes(dims: Dims, spacing: [f64; 3], origin: [f64; 3], datatype: i16) -> Result<Vec<u8>> {
    for a in 0..3 {
        if dims[a] > i16::MAX as usize {
            return Err(Error::Unsupported(format!(
                "axis {a} has {} voxels; NIfTI-1 allows at most 32767",
                dims[a]
            )));
        }
    }
    let bpv = NiftiHeader::bytes_per_voxel(datatype).expect("known datatype");
    let mut h = vec![0u8; DEFAULT_VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_LEN as i32);
    h[38] = b'r';
    let nd = [3i16, dims[2] as i16, dims[1] as i16, dims[0] as i16, 1, 1, 1, 1];
    for (a, v) in nd.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * a..], *v);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], (8 * bpv) as i16);
    let pix = [1.0f32, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 1.0, 1.0, 1.0, 1.0];
    for (a, v) in pix.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * a..], *v);
    }
    LittleEndian::write_f32(&mut h[108..], DEFAULT_VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    // millimetres
    h[123] = 2;
    LittleEndian::write_i16(&mut h[254..], 1);
    for a in 0..3 {
        // srow rows are world x, y, z; world x follows the fastest axis
        let row = 280 + 16 * a;
        LittleEndian::write_f32(&mut h[row + 4 * a..], spacing[2 - a] as f32);
        LittleEndian::write_f32(&mut h[row + 12..], origin[2 - a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

pub fn nifti_bytes(v: &Volume3, width: FloatWidth) -> Result<Vec<u8>> {
    let dt = match width {
        FloatWidth::F32 => DT_FLOAT32,
        FloatWidth::F64 => DT_FLOAT64,
    };
    let mut out = header_bytes(v.dims(), v.spacing, v.origin, dt)?;
    out.reserve(v.len() * if dt == DT_FLOAT32 { 4 } else { 8 });
    let mut buf = [0u8; 8];
    for &x in v.data() {
        if dt == DT_FLOAT32 {
            LittleEndian::write_f32(&mut buf, x as f32);
            out.extend_from_slice(&buf[..4]);
        } else {
            LittleEndian::write_f64(&mut buf, x);
            out.extend_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Labels up to 255 are stored as `uint8`, larger ones as `int16`.
pub fn label_nifti_bytes(l: &LabelVolume) -> Result<Vec<u8>> {
    let max = l.max_label();
    let dt = if max <= u8::MAX as u16 {
        DT_UINT8
    } else if max <= i16::MAX as u16 {
        DT_INT16
    } else {
        return Err(Error::Unsupported(format!("label {max} exceeds int16")));
    };
    let mut out = header_bytes(l.dims(), l.spacing, l.origin, dt)?;
    for &x in l.data() {
        if dt == DT_UINT8 {
            out.push(x as u8);
        } else {
            out.extend_from_slice(&(x as i16).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_nifti(v: &Volume3, path: &Path, width: FloatWidth) -> Result<()> {
    let bytes = nifti_bytes(v, width)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn write_label_nifti(l: &LabelVolume, path: &Path) -> Result<()> {
    let bytes = label_nifti_bytes(l)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Rewrites a little-endian image produced by [`nifti_bytes`] or
/// [`label_nifti_bytes`] in big-endian byte order.
pub fn to_big_endian(le: &[u8]) -> Result<Vec<u8>> {
    let h = parse_header(le)?;
    if h.endian != Endian::Little {
        return Err(Error::invalid("image is already big-endian"));
    }
    let mut out = le.to_vec();
    let swap = |buf: &mut [u8], off: usize, width: usize| buf[off..off + width].reverse();
    // (offset, field width, count) for every multi-byte header field
    let fields: &[(usize, usize, usize)] = &[
        (0, 4, 1),
        (32, 4, 1),
        (36, 2, 1),
        (40, 2, 8),
        (56, 4, 3),
        (68, 2, 4),
        (76, 4, 8),
        (108, 4, 3),
        (120, 2, 1),
        (124, 4, 4),
        (140, 4, 2),
        (252, 2, 2),
        (256, 4, 18),
    ];
    for &(off, w, count) in fields {
        for c in 0..count {
            swap(&mut out, off + c * w, w);
        }
    }
    let bpv = NiftiHeader::bytes_per_voxel(h.datatype).expect("checked");
    let n = h.dims.iter().product::<usize>();
    if bpv > 1 {
        for v in 0..n {
            swap(&mut out, h.vox_offset + v * bpv, bpv);
        }
    }
    Ok(out)
}
