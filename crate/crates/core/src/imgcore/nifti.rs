//! Minimal single-file NIfTI-1 (`.nii`) reader and writer.
//!
//! Supported: uncompressed payloads of type uint8, int16 and float32,
//! `scl_slope`/`scl_inter` scaling, and orientation matrices that are
//! signed axis permutations. Permuted or flipped grids are reordered on
//! read so the returned volume has identity direction and positive spacing.
//! Anything else is rejected.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::{Geometry, ImageError, Mask, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

/// Tolerance for deciding that an orientation matrix entry is zero.
const AXIS_TOL: f64 = 1e-6;

/// f32 header fields widened through their shortest decimal form, so a
/// value such as 0.8 written as f32 reads back as the f64 literal 0.8.
fn widen(v: f32) -> f64 {
    format!("{v}").parse().unwrap_or(v as f64)
}

struct Header {
    dims: [usize; 3],
    datatype: i16,
    vox_offset: usize,
    slope: f64,
    inter: f64,
    /// Rows of the voxel-to-world affine.
    affine: [[f64; 4]; 3],
}

enum Endian {
    Little,
    Big,
}

struct Fields<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Fields<'_> {
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
}

fn parse_header(bytes: &[u8]) -> Result<(Header, Endian), ImageError> {
    if bytes.len() < HEADER_SIZE {
        return Err(ImageError::Format(format!(
            "file too small for a NIfTI-1 header ({} bytes)",
            bytes.len()
        )));
    }
    let endian = if LittleEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        Endian::Little
    } else if BigEndian::read_i32(bytes) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(ImageError::Format("sizeof_hdr is not 348".into()));
    };
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(ImageError::Format(format!(
            "unsupported magic {:?} (only single-file .nii is supported)",
            String::from_utf8_lossy(magic)
        )));
    }
    let f = Fields { bytes, endian };

    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(ImageError::Format(format!("invalid dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for d in 0..ndim as usize {
        let n = f.i16(42 + 2 * d);
        if n < 1 {
            return Err(ImageError::Format(format!("invalid dim[{}] = {n}", d + 1)));
        }
        if d < 3 {
            dims[d] = n as usize;
        } else if n != 1 {
            return Err(ImageError::Unsupported(format!(
                "image has {ndim} dimensions; only 3-D volumes are supported"
            )));
        }
    }

    let datatype = f.i16(70);
    let pixdim: [f64; 3] = std::array::from_fn(|a| widen(f.f32(80 + 4 * a)).abs());
    let vox_offset = f.f32(108);
    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(ImageError::Format(format!("invalid vox_offset {vox_offset}")));
    }
    let slope = widen(f.f32(112));
    let inter = widen(f.f32(116));
    let (slope, inter) = if slope == 0.0 || !slope.is_finite() { (1.0, 0.0) } else { (slope, inter) };

    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    let affine = if sform_code > 0 {
        std::array::from_fn(|r| std::array::from_fn(|c| widen(f.f32(280 + 16 * r + 4 * c))))
    } else if qform_code > 0 {
        let qfac = if f.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let quat = [widen(f.f32(256)), widen(f.f32(260)), widen(f.f32(264))];
        let offset = [widen(f.f32(268)), widen(f.f32(272)), widen(f.f32(276))];
        qform_affine(quat, offset, pixdim, qfac)
    } else {
        let mut a = [[0.0; 4]; 3];
        for (r, row) in a.iter_mut().enumerate() {
            row[r] = if pixdim[r] > 0.0 { pixdim[r] } else { 1.0 };
        }
        a
    };

    Ok((
        Header { dims, datatype, vox_offset: vox_offset as usize, slope, inter, affine },
        f.endian,
    ))
}

fn qform_affine(quat: [f64; 3], offset: [f64; 3], pixdim: [f64; 3], qfac: f64) -> [[f64; 4]; 3] {
    let [b, c, d] = quat;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let scale = [pixdim[0], pixdim[1], qfac * pixdim[2]];
    let mut out = [[0.0; 4]; 3];
    for row in 0..3 {
        for col in 0..3 {
            let s = if scale[col] == 0.0 { 1.0 } else { scale[col] };
            out[row][col] = r[row][col] * s;
        }
        out[row][3] = offset[row];
    }
    out
}

/// For each voxel axis: the world axis it maps to and the signed step.
fn axis_mapping(affine: &[[f64; 4]; 3]) -> Result<[(usize, f64); 3], ImageError> {
    let mut map = [(0usize, 0.0f64); 3];
    let mut used = [false; 3];
    for (col, slot) in map.iter_mut().enumerate() {
        let column: [f64; 3] = std::array::from_fn(|r| affine[r][col]);
        let scale = column.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let nonzero: Vec<usize> =
            (0..3).filter(|&r| column[r].abs() > AXIS_TOL * scale.max(1.0)).collect();
        if nonzero.len() != 1 || used[nonzero[0]] {
            return Err(ImageError::Unsupported(
                "orientation matrix is not an axis-aligned permutation".into(),
            ));
        }
        let row = nonzero[0];
        used[row] = true;
        *slot = (row, column[row]);
    }
    Ok(map)
}

fn read_payload(
    bytes: &[u8],
    header: &Header,
    endian: &Endian,
) -> Result<Vec<f64>, ImageError> {
    let n = header.dims.iter().product::<usize>();
    let width = match header.datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(ImageError::Unsupported(format!("NIfTI datatype code {other}"))),
    };
    let payload = bytes.get(header.vox_offset..).unwrap_or(&[]);
    let available = payload.len() / width;
    if available < n {
        return Err(ImageError::PayloadMismatch { declared: n, available });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let chunk = &payload[i * width..(i + 1) * width];
        let raw = match (header.datatype, endian) {
            (DT_UINT8, _) => chunk[0] as f64,
            (DT_INT16, Endian::Little) => LittleEndian::read_i16(chunk) as f64,
            (DT_INT16, Endian::Big) => BigEndian::read_i16(chunk) as f64,
            (_, Endian::Little) => LittleEndian::read_f32(chunk) as f64,
            (_, Endian::Big) => BigEndian::read_f32(chunk) as f64,
        };
        let v = if header.slope == 1.0 && header.inter == 0.0 {
            raw
        } else {
            raw * header.slope + header.inter
        };
        if !v.is_finite() {
            return Err(ImageError::NonFinite(i));
        }
        out.push(v);
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(Geometry, Vec<f64>), ImageError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(ImageError::Unsupported("gzip-compressed NIfTI".into()));
    }
    let (header, endian) = parse_header(bytes)?;
    let values = read_payload(bytes, &header, &endian)?;
    let map = axis_mapping(&header.affine)?;

    // Reorder into a grid whose axis w is world axis w, increasing.
    let src_dims = header.dims;
    let mut dims = [0usize; 3];
    let mut spacing = [0.0f64; 3];
    let mut origin = [0.0f64; 3];
    for (col, &(row, step)) in map.iter().enumerate() {
        dims[row] = src_dims[col];
        spacing[row] = step.abs();
        let start = header.affine[row][3];
        origin[row] =
            if step < 0.0 { start + step * (src_dims[col] as f64 - 1.0) } else { start };
    }
    let geom = Geometry::new(dims, spacing, origin)?;
    let identity = map.iter().enumerate().all(|(c, &(r, s))| c == r && s > 0.0);
    if identity {
        return Ok((geom, values));
    }
    let mut out = vec![0.0; values.len()];
    for k in 0..src_dims[2] {
        for j in 0..src_dims[1] {
            for i in 0..src_dims[0] {
                let src = [i, j, k];
                let mut dst = [0usize; 3];
                for (col, &(row, step)) in map.iter().enumerate() {
                    dst[row] = if step < 0.0 { src_dims[col] - 1 - src[col] } else { src[col] };
                }
                out[geom.index(dst[0], dst[1], dst[2])] =
                    values[i + src_dims[0] * (j + src_dims[1] * k)];
            }
        }
    }
    Ok((geom, out))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    let (geom, values) = decode(&bytes).map_err(|e| e.at(path))?;
    Volume::from_f64(geom, &values).map_err(|e| e.at(path))
}

/// Load a mask; any nonzero voxel becomes 1.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask, ImageError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    let (geom, values) = decode(&bytes).map_err(|e| e.at(path))?;
    Mask::new(geom, values.iter().map(|&v| u8::from(v != 0.0)).collect())
}

fn encode_header(geom: &Geometry, datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..], HEADER_SIZE as i32);
    h[38] = b'r';
    LittleEndian::write_i16(&mut h[40..], 3);
    for a in 0..3 {
        LittleEndian::write_i16(&mut h[42 + 2 * a..], geom.dims[a] as i16);
    }
    for a in 3..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * a..], 1);
    }
    LittleEndian::write_i16(&mut h[70..], datatype);
    LittleEndian::write_i16(&mut h[72..], bitpix);
    LittleEndian::write_f32(&mut h[76..], 1.0);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[80 + 4 * a..], geom.spacing[a] as f32);
    }
    LittleEndian::write_f32(&mut h[108..], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    // mm units
    h[123] = 2;
    // scanner-anat sform and qform with identity rotation
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..], geom.origin[a] as f32);
        let row = 280 + 16 * a;
        LittleEndian::write_f32(&mut h[row + 4 * a..], geom.spacing[a] as f32);
        LittleEndian::write_f32(&mut h[row + 12..], geom.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let mut f = fs::File::create(path).map_err(|e| ImageError::io(path, e))?;
    f.write_all(bytes).map_err(|e| ImageError::io(path, e))
}

fn check_representable(geom: &Geometry) -> Result<(), ImageError> {
    if geom.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(ImageError::InvalidGeometry(format!(
            "dimension exceeds NIfTI-1 limit: {:?}",
            geom.dims
        )));
    }
    Ok(())
}

/// Write a float32 `.nii`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    check_representable(v.geometry())?;
    let mut bytes = encode_header(v.geometry(), DT_FLOAT32, 32);
    bytes.reserve(v.len() * 4);
    let mut buf = [0u8; 4];
    for &x in v.data() {
        LittleEndian::write_f32(&mut buf, x);
        bytes.extend_from_slice(&buf);
    }
    write_file(path, &bytes)
}

/// Write a uint8 `.nii`.
pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    check_representable(m.geometry())?;
    let mut bytes = encode_header(m.geometry(), DT_UINT8, 8);
    bytes.extend_from_slice(m.data());
    write_file(path, &bytes)
}
