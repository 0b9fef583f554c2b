//! NIfTI-1 reading and writing for volumes and label maps.
//!
//! Supports single-file `.nii` and gzip-compressed `.nii.gz`, little- and
//! big-endian headers, and the common scalar datatypes. Volumes are written
//! as little-endian float32 with slope/intercept (1, 0), so a write-read
//! round trip is voxel-bit-identical. Label maps are written as uint16.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::volume::{Affine, LabelMap, LabelVocabulary, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

// Header field offsets (NIfTI-1).
const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_DESCRIP: usize = 148;
const OFF_QFORM_CODE: usize = 252;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW_X: usize = 280;
const OFF_SROW_Y: usize = 296;
const OFF_SROW_Z: usize = 312;
const OFF_MAGIC: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

fn dtype_size(code: i16) -> Option<usize> {
    match code {
        DT_UINT8 => Some(1),
        DT_INT16 | DT_UINT16 => Some(2),
        DT_INT32 | DT_FLOAT32 => Some(4),
        DT_FLOAT64 => Some(8),
        _ => None,
    }
}

struct Header {
    shape: [usize; 3],   // (nx, ny, nz) as stored in dim[1..3]
    pixdim: [f64; 3],    // (sx, sy, sz)
    datatype: i16,
    vox_offset: usize,
    scl_slope: f32,
    scl_inter: f32,
    affine: Affine,
    little_endian: bool,
}

fn read_file_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .map_err(|e| Error::Nifti(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut raw)?;
    // Gzip magic, regardless of extension.
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| {
            Error::Nifti(format!("gzip decode failed for {}: {e}", path.display()))
        })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!(
            "{}: file shorter than a NIfTI-1 header",
            path.display()
        )));
    }
    let le = LittleEndian::read_i32(&bytes[OFF_SIZEOF_HDR..OFF_SIZEOF_HDR + 4]) == 348;
    let be = BigEndian::read_i32(&bytes[OFF_SIZEOF_HDR..OFF_SIZEOF_HDR + 4]) == 348;
    if !le && !be {
        return Err(Error::Nifti(format!(
            "{}: not a NIfTI-1 file (sizeof_hdr != 348)",
            path.display()
        )));
    }
    let magic = &bytes[OFF_MAGIC..OFF_MAGIC + 4];
    if magic == b"ni1\0" {
        return Err(Error::Nifti(format!(
            "{}: detached .hdr/.img pairs are not supported",
            path.display()
        )));
    }
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!("{}: bad NIfTI magic", path.display())));
    }

    let rd_i16 = |off: usize| -> i16 {
        if le {
            LittleEndian::read_i16(&bytes[off..off + 2])
        } else {
            BigEndian::read_i16(&bytes[off..off + 2])
        }
    };
    let rd_f32 = |off: usize| -> f32 {
        if le {
            LittleEndian::read_f32(&bytes[off..off + 4])
        } else {
            BigEndian::read_f32(&bytes[off..off + 4])
        }
    };

    let ndim = rd_i16(OFF_DIM);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("{}: bad ndim {ndim}", path.display())));
    }
    let mut dim = [1usize; 7];
    for (i, d) in dim.iter_mut().enumerate() {
        let v = rd_i16(OFF_DIM + 2 + i * 2);
        if i < ndim as usize {
            if v <= 0 {
                return Err(Error::Nifti(format!(
                    "{}: non-positive dimension {v}",
                    path.display()
                )));
            }
            *d = v as usize;
        }
    }
    // Trailing singleton dims (e.g. 4D with one frame) are accepted.
    if dim[3..].iter().any(|&d| d > 1) {
        return Err(Error::Nifti(format!(
            "{}: only 3D images are supported, dims {:?}",
            path.display(),
            &dim[..ndim as usize]
        )));
    }

    let datatype = rd_i16(OFF_DATATYPE);
    let elem = dtype_size(datatype).ok_or_else(|| {
        Error::Nifti(format!("{}: unsupported datatype code {datatype}", path.display()))
    })?;
    let bitpix = rd_i16(OFF_BITPIX);
    if bitpix as usize != elem * 8 {
        return Err(Error::Nifti(format!(
            "{}: bitpix {bitpix} inconsistent with datatype {datatype}",
            path.display()
        )));
    }

    let mut pixdim = [1.0f64; 3];
    for (i, p) in pixdim.iter_mut().enumerate() {
        let v = rd_f32(OFF_PIXDIM + 4 * (i + 1)) as f64;
        *p = if v > 0.0 { v } else { 1.0 };
    }

    let vox_offset = rd_f32(OFF_VOX_OFFSET);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Nifti(format!(
            "{}: bad vox_offset {vox_offset}",
            path.display()
        )));
    }

    let sform_code = rd_i16(OFF_SFORM_CODE);
    let affine = if sform_code > 0 {
        let row = |off: usize| -> [f64; 4] {
            [
                rd_f32(off) as f64,
                rd_f32(off + 4) as f64,
                rd_f32(off + 8) as f64,
                rd_f32(off + 12) as f64,
            ]
        };
        [
            row(OFF_SROW_X),
            row(OFF_SROW_Y),
            row(OFF_SROW_Z),
            [0.0, 0.0, 0.0, 1.0],
        ]
    } else {
        // Fall back to spacing on the diagonal (qform decoding not needed
        // for co-registered data written by this toolkit or the phantom).
        [
            [pixdim[0], 0.0, 0.0, 0.0],
            [0.0, pixdim[1], 0.0, 0.0],
            [0.0, 0.0, pixdim[2], 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    };

    Ok(Header {
        shape: [dim[0], dim[1], dim[2]],
        pixdim,
        datatype,
        vox_offset: vox_offset as usize,
        scl_slope: rd_f32(OFF_SCL_SLOPE),
        scl_inter: rd_f32(OFF_SCL_INTER),
        affine,
        little_endian: le,
    })
}

fn decode_voxels(h: &Header, body: &[u8], path: &Path) -> Result<Vec<f32>> {
    let n = h.shape[0] * h.shape[1] * h.shape[2];
    let elem = dtype_size(h.datatype).unwrap();
    let need = n * elem;
    if body.len() < need {
        return Err(Error::Nifti(format!(
            "{}: data section too short ({} < {need} bytes)",
            path.display(),
            body.len()
        )));
    }
    let le = h.little_endian;
    let mut out = Vec::with_capacity(n);
    match h.datatype {
        DT_UINT8 => out.extend(body[..n].iter().map(|&b| b as f32)),
        DT_INT16 => {
            for c in body[..need].chunks_exact(2) {
                let v = if le { LittleEndian::read_i16(c) } else { BigEndian::read_i16(c) };
                out.push(v as f32);
            }
        }
        DT_UINT16 => {
            for c in body[..need].chunks_exact(2) {
                let v = if le { LittleEndian::read_u16(c) } else { BigEndian::read_u16(c) };
                out.push(v as f32);
            }
        }
        DT_INT32 => {
            for c in body[..need].chunks_exact(4) {
                let v = if le { LittleEndian::read_i32(c) } else { BigEndian::read_i32(c) };
                out.push(v as f32);
            }
        }
        DT_FLOAT32 => {
            for c in body[..need].chunks_exact(4) {
                out.push(if le { LittleEndian::read_f32(c) } else { BigEndian::read_f32(c) });
            }
        }
        DT_FLOAT64 => {
            for c in body[..need].chunks_exact(8) {
                let v = if le { LittleEndian::read_f64(c) } else { BigEndian::read_f64(c) };
                out.push(v as f32);
            }
        }
        _ => unreachable!(),
    }
    // Apply scaling only when it is a real rescale.
    let slope = h.scl_slope;
    let inter = h.scl_inter;
    if slope.is_finite() && slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        for v in &mut out {
            *v = *v * slope + inter;
        }
    }
    Ok(out)
}

/// Shape and raw voxel values of a NIfTI file in canonical (d0,d1,d2) order.
fn load_raw(path: &Path) -> Result<(Header, Array3<f32>)> {
    let bytes = read_file_bytes(path)?;
    let h = parse_header(&bytes, path)?;
    if bytes.len() < h.vox_offset {
        return Err(Error::Nifti(format!(
            "{}: vox_offset beyond end of file",
            path.display()
        )));
    }
    let vox = decode_voxels(&h, &bytes[h.vox_offset..], path)?;
    // Disk order: dim[1] (x) fastest. A C-order array of shape (nz, ny, nx)
    // has exactly that memory layout, so the buffer maps straight in.
    let (nx, ny, nz) = (h.shape[0], h.shape[1], h.shape[2]);
    let data = Array3::from_shape_vec((nz, ny, nx), vox)
        .map_err(|e| Error::Nifti(format!("{}: shape error: {e}", path.display())))?;
    Ok((h, data))
}

/// Load a scalar volume. Intensities are cast to f32.
pub fn load_volume<P: AsRef<Path>>(path: P) -> Result<Volume> {
    let path = path.as_ref();
    let (h, data) = load_raw(path)?;
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: volume contains NaN/Inf voxels",
            path.display()
        )));
    }
    Volume::new(data, [h.pixdim[2], h.pixdim[1], h.pixdim[0]], h.affine)
}

/// Load an integer label map and validate it against `vocabulary`.
pub fn load_label_map<P: AsRef<Path>>(path: P, vocabulary: LabelVocabulary) -> Result<LabelMap> {
    let path = path.as_ref();
    let (h, data) = load_raw(path)?;
    let mut labels = Array3::<u16>::zeros(data.raw_dim());
    for (l, &v) in labels.iter_mut().zip(data.iter()) {
        if !v.is_finite() || v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f32 {
            return Err(Error::Data(format!(
                "{}: voxel value {v} is not a valid label id",
                path.display()
            )));
        }
        *l = v as u16;
    }
    LabelMap::new(labels, [h.pixdim[2], h.pixdim[1], h.pixdim[0]], h.affine, vocabulary)
}

fn build_header(shape: [usize; 3], spacing: [f64; 3], affine: &Affine, datatype: i16) -> Vec<u8> {
    let mut buf = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut buf[OFF_SIZEOF_HDR..OFF_SIZEOF_HDR + 4], 348);
    buf[38] = b'r'; // regular, per convention

    // shape is (d0,d1,d2) = (nz,ny,nx); dims on disk are (nx,ny,nz).
    LittleEndian::write_i16(&mut buf[OFF_DIM..OFF_DIM + 2], 3);
    let disk_dims = [shape[2], shape[1], shape[0]];
    for (i, &d) in disk_dims.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[OFF_DIM + 2 + 2 * i..OFF_DIM + 4 + 2 * i], d as i16);
    }
    for i in 3..7 {
        LittleEndian::write_i16(&mut buf[OFF_DIM + 2 + 2 * i..OFF_DIM + 4 + 2 * i], 1);
    }

    LittleEndian::write_i16(&mut buf[OFF_DATATYPE..OFF_DATATYPE + 2], datatype);
    let bits = (dtype_size(datatype).unwrap() * 8) as i16;
    LittleEndian::write_i16(&mut buf[OFF_BITPIX..OFF_BITPIX + 2], bits);

    LittleEndian::write_f32(&mut buf[OFF_PIXDIM..OFF_PIXDIM + 4], 1.0); // qfac
    let disk_spacing = [spacing[2], spacing[1], spacing[0]];
    for (i, &s) in disk_spacing.iter().enumerate() {
        let off = OFF_PIXDIM + 4 * (i + 1);
        LittleEndian::write_f32(&mut buf[off..off + 4], s as f32);
    }

    LittleEndian::write_f32(&mut buf[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut buf[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4], 1.0);
    LittleEndian::write_f32(&mut buf[OFF_SCL_INTER..OFF_SCL_INTER + 4], 0.0);
    buf[OFF_XYZT_UNITS] = 2; // millimetres

    let descrip = b"wmseg";
    buf[OFF_DESCRIP..OFF_DESCRIP + descrip.len()].copy_from_slice(descrip);

    LittleEndian::write_i16(&mut buf[OFF_QFORM_CODE..OFF_QFORM_CODE + 2], 0);
    LittleEndian::write_i16(&mut buf[OFF_SFORM_CODE..OFF_SFORM_CODE + 2], 1);
    for (row, off) in [(0, OFF_SROW_X), (1, OFF_SROW_Y), (2, OFF_SROW_Z)] {
        for c in 0..4 {
            let o = off + 4 * c;
            LittleEndian::write_f32(&mut buf[o..o + 4], affine[row][c] as f32);
        }
    }

    buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
    buf
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        let mut f = file;
        f.write_all(bytes)?;
    }
    Ok(())
}

/// Write a volume as little-endian float32 NIfTI-1 (.nii or .nii.gz).
pub fn save_volume<P: AsRef<Path>>(v: &Volume, path: P) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(v.shape(), v.spacing, &v.affine, DT_FLOAT32);
    bytes.reserve(v.data.len() * 4);
    // C-order (nz,ny,nx) iteration == disk order (x fastest).
    for &x in v.data.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Write a label map as little-endian uint16 NIfTI-1.
pub fn save_label_map<P: AsRef<Path>>(m: &LabelMap, path: P) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = build_header(m.shape(), m.spacing, &m.affine, DT_UINT16);
    bytes.reserve(m.data.len() * 2);
    for &x in m.data.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Write a stack of per-class probability grids as one 4D float32 NIfTI.
///
/// `probs` has shape (classes, d0, d1, d2); the class axis becomes the NIfTI
/// fourth dimension.
pub fn save_prob_volume<P: AsRef<Path>>(
    probs: &ndarray::Array4<f32>,
    spacing: [f64; 3],
    affine: &Affine,
    path: P,
) -> Result<()> {
    let path = path.as_ref();
    let sh = probs.shape();
    let (classes, d0, d1, d2) = (sh[0], sh[1], sh[2], sh[3]);
    let mut bytes = build_header([d0, d1, d2], spacing, affine, DT_FLOAT32);
    // Patch dims to 4D: dim[0]=4, dim[4]=classes.
    LittleEndian::write_i16(&mut bytes[OFF_DIM..OFF_DIM + 2], 4);
    LittleEndian::write_i16(&mut bytes[OFF_DIM + 8..OFF_DIM + 10], classes as i16);
    bytes.reserve(probs.len() * 4);
    // Memory order (c,d0,d1,d2) C-order == disk order x,y,z,t with t slowest.
    for &x in probs.iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::affine_from_spacing;
    use ndarray::Array3;

    fn demo_volume() -> Volume {
        let data = Array3::from_shape_fn((5, 6, 7), |(a, b, c)| {
            (a as f32 * 1.7 - b as f32 * 0.3 + c as f32 * 0.11).sin()
        });
        Volume {
            data,
            spacing: [3.0, 1.0, 1.1],
            affine: affine_from_spacing([3.0, 1.0, 1.1]),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v = demo_volume();
        save_volume(&v, &p).unwrap();
        let r = load_volume(&p).unwrap();
        assert_eq!(r.shape(), v.shape());
        for (a, b) in r.data.iter().zip(v.data.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in r.spacing.iter().zip(v.spacing.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn compressed_and_uncompressed_reads_agree() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("v.nii");
        let gz = dir.path().join("v.nii.gz");
        let v = demo_volume();
        save_volume(&v, &plain).unwrap();
        save_volume(&v, &gz).unwrap();
        let a = load_volume(&plain).unwrap();
        let b = load_volume(&gz).unwrap();
        // Oracle: byte-compare both reads.
        let bits_a: Vec<u32> = a.data.iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = b.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn nan_voxel_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nii");
        let mut v = demo_volume();
        // Bypass Volume::new validation to force the file-level failure.
        v.data[[1, 2, 3]] = f32::NAN;
        save_volume(&v, &p).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("bad.nii"), "{err}");
    }

    #[test]
    fn label_round_trip_and_vocabulary_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labs.nii.gz");
        let mut data = Array3::<u16>::zeros((4, 4, 4));
        data[[0, 1, 2]] = 3;
        data[[3, 3, 3]] = 17;
        let m = LabelMap::new(
            data,
            [1.0; 3],
            affine_from_spacing([1.0; 3]),
            LabelVocabulary::regions(34),
        )
        .unwrap();
        save_label_map(&m, &p).unwrap();
        let r = load_label_map(&p, LabelVocabulary::regions(34)).unwrap();
        assert_eq!(r.data, m.data);
        // A too-small vocabulary must reject id 17.
        assert!(load_label_map(&p, LabelVocabulary::regions(5)).is_err());
    }

    #[test]
    fn big_endian_files_are_readable() {
        // Hand-build a 2x2x2 big-endian float32 file.
        let mut buf = vec![0u8; VOX_OFFSET];
        BigEndian::write_i32(&mut buf[0..4], 348);
        BigEndian::write_i16(&mut buf[OFF_DIM..OFF_DIM + 2], 3);
        for i in 0..3 {
            BigEndian::write_i16(&mut buf[OFF_DIM + 2 + 2 * i..OFF_DIM + 4 + 2 * i], 2);
        }
        BigEndian::write_i16(&mut buf[OFF_DATATYPE..OFF_DATATYPE + 2], DT_FLOAT32);
        BigEndian::write_i16(&mut buf[OFF_BITPIX..OFF_BITPIX + 2], 32);
        for i in 1..4 {
            BigEndian::write_f32(&mut buf[OFF_PIXDIM + 4 * i..OFF_PIXDIM + 4 * i + 4], 1.0);
        }
        BigEndian::write_f32(&mut buf[OFF_VOX_OFFSET..OFF_VOX_OFFSET + 4], VOX_OFFSET as f32);
        buf[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(b"n+1\0");
        for i in 0..8u32 {
            let mut b = [0u8; 4];
            BigEndian::write_f32(&mut b, i as f32);
            buf.extend_from_slice(&b);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("be.nii");
        std::fs::write(&p, &buf).unwrap();
        let v = load_volume(&p).unwrap();
        let flat: Vec<f32> = v.data.iter().copied().collect();
        assert_eq!(flat, (0..8).map(|i| i as f32).collect::<Vec<_>>());
    }
}
