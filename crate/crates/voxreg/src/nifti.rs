//! Minimal NIfTI-1 reader/writer.
//!
//! Supports the five datatypes this pipeline needs (uint8, int16, int32,
//! float32, float64), `scl_slope`/`scl_inter` rescaling, qform/sform
//! geometry with sform precedence, gzip-compressed files (sniffed from the
//! 0x1f8b magic), and 5-D vector volumes for displacement fields. Scalar
//! images are written as float32, label maps as int32, displacement fields
//! as float32 with world-space (mm) vectors in a trailing size-3 dimension.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use crate::error::{Error, Result};
use crate::math::{self, Mat3};
use crate::transforms::DisplacementField;
use crate::volume::{GridGeometry, ImageVolume, LabelVolume};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

/// Byte offsets of the NIfTI-1 header fields used here.
mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QUATERN_C: usize = 260;
    pub const QUATERN_D: usize = 264;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// Vector intent code used for displacement-field volumes.
const INTENT_VECTOR: i16 = 1007;

/// Supported voxel datatypes with their NIfTI codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataType {
    Uint8,
    Int16,
    Int32,
    Float32,
    Float64,
}

impl DataType {
    fn from_code(code: i16) -> Option<DataType> {
        match code {
            2 => Some(DataType::Uint8),
            4 => Some(DataType::Int16),
            8 => Some(DataType::Int32),
            16 => Some(DataType::Float32),
            64 => Some(DataType::Float64),
            _ => None,
        }
    }

    fn byte_size(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Int32 => 4,
            DataType::Float32 => 4,
            DataType::Float64 => 8,
        }
    }
}

/// Fully decoded file: geometry, the 8-entry dim array, and voxel values
/// already passed through `scl_slope`/`scl_inter`.
struct RawNifti {
    geometry: GridGeometry,
    dim: [usize; 8],
    intent_code: i16,
    data: Vec<f64>,
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 2];
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    let mut raw = head[..n].to_vec();
    raw.extend_from_slice(&rest);
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut decoder = GzDecoder::new(&raw[..]);
        let mut out = Vec::new();
        decoder.read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse<E: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<RawNifti> {
    let h = &bytes[..HEADER_SIZE];
    if &h[offset::MAGIC..offset::MAGIC + 4] != MAGIC {
        return Err(Error::format(path, "bad magic (expected single-file NIfTI-1 \"n+1\")"));
    }
    let mut dim = [1usize; 8];
    let ndim = E::read_i16(&h[offset::DIM..]);
    if !(1..=7).contains(&ndim) {
        return Err(Error::format(path, format!("invalid dim[0] = {ndim}")));
    }
    dim[0] = ndim as usize;
    for i in 1..8 {
        let d = E::read_i16(&h[offset::DIM + 2 * i..]);
        dim[i] = if i <= ndim as usize {
            if d < 1 {
                return Err(Error::format(path, format!("invalid dim[{i}] = {d}")));
            }
            d as usize
        } else {
            1
        };
    }

    let dt_code = E::read_i16(&h[offset::DATATYPE..]);
    let dtype = DataType::from_code(dt_code)
        .ok_or_else(|| Error::Unsupported(format!("NIfTI datatype code {dt_code} in {}", path.display())))?;
    let bitpix = E::read_i16(&h[offset::BITPIX..]);
    if bitpix as usize != dtype.byte_size() * 8 {
        return Err(Error::format(path, format!("bitpix {bitpix} inconsistent with datatype {dt_code}")));
    }

    let mut pixdim = [0.0f64; 8];
    for i in 0..8 {
        pixdim[i] = E::read_f32(&h[offset::PIXDIM + 4 * i..]) as f64;
    }
    let vox_offset = E::read_f32(&h[offset::VOX_OFFSET..]) as usize;
    if vox_offset < HEADER_SIZE {
        return Err(Error::format(path, format!("vox_offset {vox_offset} below header size")));
    }
    let slope = E::read_f32(&h[offset::SCL_SLOPE..]) as f64;
    let inter = E::read_f32(&h[offset::SCL_INTER..]) as f64;
    let intent_code = E::read_i16(&h[offset::INTENT_CODE..]);

    let geometry = decode_geometry::<E>(path, h, &pixdim, [dim[1], dim[2], dim[3]])?;

    let count: usize = dim[1..8].iter().product();
    let need = vox_offset + count * dtype.byte_size();
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated payload: need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let body = &bytes[vox_offset..need];
    let mut data = Vec::with_capacity(count);
    match dtype {
        DataType::Uint8 => data.extend(body.iter().map(|&b| b as f64)),
        DataType::Int16 => {
            for i in 0..count {
                data.push(E::read_i16(&body[2 * i..]) as f64);
            }
        }
        DataType::Int32 => {
            for i in 0..count {
                data.push(E::read_i32(&body[4 * i..]) as f64);
            }
        }
        DataType::Float32 => {
            for i in 0..count {
                data.push(E::read_f32(&body[4 * i..]) as f64);
            }
        }
        DataType::Float64 => {
            for i in 0..count {
                data.push(E::read_f64(&body[8 * i..]));
            }
        }
    }
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "non-finite voxel value after scaling"));
    }
    Ok(RawNifti { geometry, dim, intent_code, data })
}

fn decode_geometry<E: ByteOrder>(
    path: &Path,
    h: &[u8],
    pixdim: &[f64; 8],
    dims: [usize; 3],
) -> Result<GridGeometry> {
    let sform_code = E::read_i16(&h[offset::SFORM_CODE..]);
    let qform_code = E::read_i16(&h[offset::QFORM_CODE..]);

    let geometry = if sform_code > 0 {
        let mut srow = [[0.0f64; 4]; 3];
        for r in 0..3 {
            for c in 0..4 {
                srow[r][c] = E::read_f32(&h[offset::SROW_X + 16 * r + 4 * c..]) as f64;
            }
        }
        let mut spacing = [0.0f64; 3];
        let mut direction = math::MAT3_IDENTITY;
        for c in 0..3 {
            let len = (srow[0][c] * srow[0][c] + srow[1][c] * srow[1][c] + srow[2][c] * srow[2][c])
                .sqrt();
            if !(len > 0.0) {
                return Err(Error::format(path, format!("sform column {c} has zero length")));
            }
            spacing[c] = len;
            for r in 0..3 {
                direction[r][c] = srow[r][c] / len;
            }
        }
        GridGeometry {
            dims,
            spacing,
            origin: [srow[0][3], srow[1][3], srow[2][3]],
            direction,
        }
    } else if qform_code > 0 {
        let b = E::read_f32(&h[offset::QUATERN_B..]) as f64;
        let c = E::read_f32(&h[offset::QUATERN_C..]) as f64;
        let d = E::read_f32(&h[offset::QUATERN_D..]) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let mut direction: Mat3 = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ];
        for r in 0..3 {
            direction[r][2] *= qfac;
        }
        let mut spacing = [0.0f64; 3];
        for i in 0..3 {
            let p = pixdim[i + 1].abs();
            if !(p > 0.0) {
                return Err(Error::format(path, format!("non-positive pixdim[{}]", i + 1)));
            }
            spacing[i] = p;
        }
        GridGeometry {
            dims,
            spacing,
            origin: [
                E::read_f32(&h[offset::QOFFSET_X..]) as f64,
                E::read_f32(&h[offset::QOFFSET_X + 4..]) as f64,
                E::read_f32(&h[offset::QOFFSET_X + 8..]) as f64,
            ],
            direction,
        }
    } else {
        let mut spacing = [1.0f64; 3];
        for i in 0..3 {
            if pixdim[i + 1] > 0.0 {
                spacing[i] = pixdim[i + 1];
            }
        }
        GridGeometry { dims, spacing, origin: [0.0; 3], direction: math::MAT3_IDENTITY }
    };
    geometry.validate().map_err(|e| Error::format(path, format!("bad geometry: {e}")))?;
    Ok(geometry)
}

fn load_raw(path: &Path) -> Result<RawNifti> {
    let bytes = read_file_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, "file shorter than a NIfTI-1 header"));
    }
    let le = LittleEndian::read_i32(&bytes[offset::SIZEOF_HDR..]);
    if le == HEADER_SIZE as i32 {
        return parse::<LittleEndian>(path, &bytes);
    }
    let be = BigEndian::read_i32(&bytes[offset::SIZEOF_HDR..]);
    if be == HEADER_SIZE as i32 {
        return parse::<BigEndian>(path, &bytes);
    }
    Err(Error::format(path, format!("sizeof_hdr = {le} in either byte order, expected 348")))
}

fn expect_scalar(path: &Path, raw: &RawNifti) -> Result<()> {
    if raw.dim[4..].iter().any(|&d| d != 1) {
        return Err(Error::Unsupported(format!(
            "{}: {}-D volume with non-singleton trailing dimensions",
            path.display(),
            raw.dim[0]
        )));
    }
    Ok(())
}

/// Loads a scalar image. Higher-dimensional files are accepted only when all
/// trailing dimensions are 1.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    expect_scalar(path, &raw)?;
    ImageVolume::new(raw.geometry, raw.data)
}

/// Loads a label map: values are rounded to the nearest integer and must be
/// non-negative.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    expect_scalar(path, &raw)?;
    let mut labels = Vec::with_capacity(raw.data.len());
    for &v in &raw.data {
        let r = v.round();
        if r < 0.0 || r > u32::MAX as f64 {
            return Err(Error::format(path, format!("label value {v} out of range")));
        }
        labels.push(r as u32);
    }
    LabelVolume::new(raw.geometry, labels)
}

/// Builds the 348-byte header (+ 4-byte extension stub) shared by all writers.
fn encode_header(
    geometry: &GridGeometry,
    dim: [usize; 8],
    datatype: DataType,
    intent_code: i16,
) -> Vec<u8> {
    let mut h = vec![0u8; HEADER_SIZE + 4];
    LittleEndian::write_i32(&mut h[offset::SIZEOF_HDR..], HEADER_SIZE as i32);
    for i in 0..8 {
        LittleEndian::write_i16(&mut h[offset::DIM + 2 * i..], dim[i] as i16);
    }
    LittleEndian::write_i16(&mut h[offset::INTENT_CODE..], intent_code);
    let dt_code = match datatype {
        DataType::Uint8 => 2,
        DataType::Int16 => 4,
        DataType::Int32 => 8,
        DataType::Float32 => 16,
        DataType::Float64 => 64,
    };
    LittleEndian::write_i16(&mut h[offset::DATATYPE..], dt_code);
    LittleEndian::write_i16(&mut h[offset::BITPIX..], (datatype.byte_size() * 8) as i16);
    let pixdim = [
        0.0,
        geometry.spacing[0] as f32,
        geometry.spacing[1] as f32,
        geometry.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        0.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[offset::PIXDIM + 4 * i..], *p);
    }
    LittleEndian::write_f32(&mut h[offset::VOX_OFFSET..], (HEADER_SIZE + 4) as f32);
    LittleEndian::write_f32(&mut h[offset::SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut h[offset::SCL_INTER..], 0.0);
    LittleEndian::write_i16(&mut h[offset::QFORM_CODE..], 0);
    LittleEndian::write_i16(&mut h[offset::SFORM_CODE..], 1);
    let wm = geometry.world_matrix();
    for r in 0..3 {
        for c in 0..3 {
            LittleEndian::write_f32(&mut h[offset::SROW_X + 16 * r + 4 * c..], wm[r][c] as f32);
        }
        LittleEndian::write_f32(&mut h[offset::SROW_X + 16 * r + 12..], geometry.origin[r] as f32);
    }
    h[offset::MAGIC..offset::MAGIC + 4].copy_from_slice(MAGIC);
    h
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().map(|e| e == "gz").unwrap_or(false);
    if gz {
        let mut enc = GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes a scalar image as float32 with an sform-only header. `.gz` paths
/// are gzip-compressed.
pub fn save_image(vol: &ImageVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = vol.geometry.dims;
    let mut bytes = encode_header(&vol.geometry, [3, d[0], d[1], d[2], 1, 1, 1, 1], DataType::Float32, 0);
    bytes.reserve(vol.data.len() * 4);
    for &v in &vol.data {
        bytes.write_f32::<LittleEndian>(v as f32).expect("vec write");
    }
    write_out(path, &bytes)
}

/// Writes a label map as int32.
pub fn save_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = labels.geometry.dims;
    let mut bytes =
        encode_header(&labels.geometry, [3, d[0], d[1], d[2], 1, 1, 1, 1], DataType::Int32, 0);
    bytes.reserve(labels.data.len() * 4);
    for &v in &labels.data {
        bytes.write_i32::<LittleEndian>(v as i32).expect("vec write");
    }
    write_out(path, &bytes)
}

/// Writes a displacement field as a 5-D float32 vector volume
/// (x, y, z, 1, 3). Vectors are converted from voxel units to world (mm)
/// displacements.
pub fn save_displacement_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let d = field.geometry.dims;
    let mut bytes = encode_header(
        &field.geometry,
        [5, d[0], d[1], d[2], 1, 3, 1, 1],
        DataType::Float32,
        INTENT_VECTOR,
    );
    let wm = field.geometry.world_matrix();
    let n = field.geometry.voxel_count();
    bytes.reserve(n * 12);
    for comp in 0..3 {
        for i in 0..n {
            let w = math::mat_vec(&wm, field.vectors[i]);
            bytes.write_f32::<LittleEndian>(w[comp] as f32).expect("vec write");
        }
    }
    write_out(path, &bytes)
}

/// Reads a displacement field written by [`save_displacement_field`] (or any
/// 5-D (x,y,z,1,3) vector NIfTI with world-space mm vectors), converting back
/// to voxel units.
pub fn load_displacement_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    let raw = load_raw(path)?;
    if raw.dim[0] != 5 || raw.dim[4] != 1 || raw.dim[5] != 3 {
        return Err(Error::Unsupported(format!(
            "{}: displacement fields must be 5-D (x,y,z,1,3), got dim {:?}",
            path.display(),
            raw.dim
        )));
    }
    if raw.intent_code != 0 && raw.intent_code != INTENT_VECTOR {
        return Err(Error::Unsupported(format!(
            "{}: unexpected intent code {} for a vector field",
            path.display(),
            raw.intent_code
        )));
    }
    let n = raw.geometry.voxel_count();
    let inv = raw.geometry.world_matrix_inv()?;
    let mut field = DisplacementField::zeros(raw.geometry.clone());
    for i in 0..n {
        let w = [raw.data[i], raw.data[n + i], raw.data[2 * n + i]];
        field.vectors[i] = math::mat_vec(&inv, w);
    }
    Ok(field)
}
