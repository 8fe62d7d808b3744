//! Minimal NIfTI-1 reader/writer for axis-aligned volumes.
//!
//! Covers the subset this pipeline needs: little-endian `.nii` / `.nii.gz`,
//! 3D grids, uint8 label masks (0 = background, 1 = midface, 2 = mandible),
//! and float32/float64 images. Spacing and origin are stored in the
//! standard f32 header fields and additionally, at full f64 precision, in a
//! private header extension so geometry round-trips exactly; readers that
//! ignore extensions still see a valid plain NIfTI-1 file.
//!
//! Voxel order on disk is x-fastest, identical to [`Volume`]'s in-memory
//! layout, so data round-trips voxel for voxel.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume, VolumeKind};

const HEADER_SIZE: usize = 348;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// Private extension code used for the f64 geometry payload.
const GEOM_ECODE: i32 = 0;

fn kind_tag(kind: VolumeKind) -> &'static [u8] {
    match kind {
        VolumeKind::Image => b"image",
        VolumeKind::Label => b"label",
        VolumeKind::Probability => b"probability",
    }
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}

fn get_i32(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}

fn geometry_extension(grid: &Grid) -> Vec<u8> {
    // Shortest round-trip decimal formatting, parses back to the same f64.
    let s = grid.spacing;
    let o = grid.origin;
    format!(
        "geom;spacing={},{},{};origin={},{},{}",
        s[0], s[1], s[2], o[0], o[1], o[2]
    )
    .into_bytes()
}

fn parse_geometry_extension(payload: &[u8]) -> Option<([f64; 3], [f64; 3])> {
    let text = std::str::from_utf8(payload).ok()?;
    let text = text.trim_end_matches('\0');
    let mut spacing = None;
    let mut origin = None;
    for part in text.split(';') {
        if let Some(rest) = part.strip_prefix("spacing=") {
            spacing = parse_triple(rest);
        } else if let Some(rest) = part.strip_prefix("origin=") {
            origin = parse_triple(rest);
        }
    }
    Some((spacing?, origin?))
}

fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let mut it = s.split(',').map(|t| t.trim().parse::<f64>().ok());
    let a = it.next()??;
    let b = it.next()??;
    let c = it.next()??;
    Some([a, b, c])
}

fn encode(v: &Volume) -> Vec<u8> {
    let grid = v.grid();
    let (datatype, bitpix): (i16, i16) = match v.kind() {
        VolumeKind::Label => (DT_UINT8, 8),
        _ => (DT_FLOAT64, 64),
    };

    let ext_payload = geometry_extension(grid);
    // esize includes the 8-byte (esize, ecode) prefix and pads to 16.
    let esize = ((8 + ext_payload.len() + 15) / 16 * 16) as i32;
    let vox_offset = (HEADER_SIZE + 4 + esize as usize) as f32;

    let mut h = vec![0u8; HEADER_SIZE];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    // dim
    put_i16(&mut h, 40, 3);
    for a in 0..3 {
        put_i16(&mut h, 42 + 2 * a, grid.dims[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    // pixdim[0] is qfac
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a] as f32);
    }
    put_f32(&mut h, 108, vox_offset);
    put_f32(&mut h, 112, 1.0); // scl_slope
    put_f32(&mut h, 116, 0.0); // scl_inter
    h[123] = 2; // xyzt_units: mm
    // qform/sform: axis-aligned, identity rotation
    put_i16(&mut h, 252, 1); // qform_code
    put_i16(&mut h, 254, 1); // sform_code
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, grid.origin[a] as f32); // qoffset
    }
    put_f32(&mut h, 280, grid.spacing[0] as f32);
    put_f32(&mut h, 280 + 12, grid.origin[0] as f32);
    put_f32(&mut h, 296 + 4, grid.spacing[1] as f32);
    put_f32(&mut h, 296 + 12, grid.origin[1] as f32);
    put_f32(&mut h, 312 + 8, grid.spacing[2] as f32);
    put_f32(&mut h, 312 + 12, grid.origin[2] as f32);
    let tag = kind_tag(v.kind());
    h[328..328 + tag.len()].copy_from_slice(tag);
    h[344..348].copy_from_slice(MAGIC);

    let data_len = match v.kind() {
        VolumeKind::Label => grid.num_voxels(),
        _ => grid.num_voxels() * 8,
    };
    let mut out = Vec::with_capacity(HEADER_SIZE + 4 + esize as usize + data_len);
    out.extend_from_slice(&h);
    out.extend_from_slice(&[1, 0, 0, 0]); // extension flag
    let mut ext = vec![0u8; esize as usize];
    put_i32(&mut ext, 0, esize);
    put_i32(&mut ext, 4, GEOM_ECODE);
    ext[8..8 + ext_payload.len()].copy_from_slice(&ext_payload);
    out.extend_from_slice(&ext);

    match v.kind() {
        VolumeKind::Label => {
            out.extend(v.data().iter().map(|&x| x as u8));
        }
        _ => {
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE + 4 {
        return Err(Error::format(path, "file too small for a NIfTI-1 header"));
    }
    if get_i32(bytes, 0) != HEADER_SIZE as i32 {
        return Err(Error::format(
            path,
            "bad sizeof_hdr (not little-endian NIfTI-1?)",
        ));
    }
    if &bytes[344..348] != MAGIC {
        return Err(Error::format(path, "missing n+1 magic"));
    }
    let ndim = get_i16(bytes, 40);
    if ndim < 3 {
        return Err(Error::format(path, format!("expected 3D volume, dim[0]={ndim}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = get_i16(bytes, 42 + 2 * a);
        if d < 1 {
            return Err(Error::format(path, format!("non-positive extent on axis {a}")));
        }
        dims[a] = d as usize;
    }
    for a in 3..ndim as usize {
        if get_i16(bytes, 42 + 2 * a) > 1 {
            return Err(Error::format(path, "volumes with >3 non-trivial dims are unsupported"));
        }
    }
    let datatype = get_i16(bytes, 70);
    let mut spacing = [0.0f64; 3];
    let mut origin = [0.0f64; 3];
    for a in 0..3 {
        spacing[a] = get_f32(bytes, 80 + 4 * a) as f64;
        origin[a] = get_f32(bytes, 268 + 4 * a) as f64;
    }
    let vox_offset = get_f32(bytes, 108) as usize;
    let scl_slope = get_f32(bytes, 112) as f64;
    let scl_inter = get_f32(bytes, 116) as f64;
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };

    // Full-precision geometry from the private extension, when present.
    if bytes[348] != 0 {
        let mut off = HEADER_SIZE + 4;
        while off + 8 <= vox_offset && off + 8 <= bytes.len() {
            let esize = get_i32(bytes, off);
            if esize < 8 || off + esize as usize > bytes.len() {
                break;
            }
            let payload = &bytes[off + 8..off + esize as usize];
            if let Some((s, o)) = parse_geometry_extension(payload) {
                spacing = s;
                origin = o;
                break;
            }
            off += esize as usize;
        }
    }

    let n = dims[0] * dims[1] * dims[2];
    let tag = &bytes[328..344];
    let tag = std::str::from_utf8(tag)
        .unwrap_or("")
        .trim_end_matches('\0')
        .to_string();
    let kind = match tag.as_str() {
        "label" => VolumeKind::Label,
        "probability" => VolumeKind::Probability,
        "image" => VolumeKind::Image,
        _ => {
            if datatype == DT_UINT8 {
                VolumeKind::Label
            } else {
                VolumeKind::Image
            }
        }
    };

    let elem = match datatype {
        DT_UINT8 => 1,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported NIfTI datatype {other} (supported: uint8, float32, float64)"),
            ))
        }
    };
    if vox_offset + n * elem > bytes.len() {
        return Err(Error::format(path, "truncated voxel data"));
    }
    let raw = &bytes[vox_offset..vox_offset + n * elem];
    let mut data = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => data.extend(raw.iter().map(|&b| b as f64)),
        DT_FLOAT32 => {
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        DT_FLOAT64 => {
            for c in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]));
            }
        }
        _ => unreachable!(),
    }
    if slope != 1.0 || scl_inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + scl_inter;
        }
    }

    let grid = Grid::new(dims, spacing, origin)
        .map_err(|e| Error::format(path, format!("bad geometry: {e}")))?;
    Volume::new(grid, kind, data).map_err(|e| Error::format(path, format!("bad voxel values: {e}")))
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

/// Write a volume as NIfTI-1; gzip-compresses when the path ends in `.gz`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(v);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::fast()))
    } else {
        Box::new(BufWriter::new(file))
    };
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a NIfTI-1 volume written by this pipeline (or any axis-aligned
/// little-endian uint8/float32/float64 single-frame file).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut head = [0u8; 2];
    let mut bytes = Vec::new();
    let n = reader.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n == 2 && head == [0x1f, 0x8b] {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut gz = GzDecoder::new(BufReader::new(file));
        gz.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    } else {
        bytes.extend_from_slice(&head[..n]);
        reader
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    }
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Grid, Interp};

    fn sample_volume(kind: VolumeKind) -> Volume {
        let grid = Grid::new([5, 4, 3], [0.39, 0.39, 1.0], [-3.25, 10.0, 0.125]).unwrap();
        let data: Vec<f64> = (0..60)
            .map(|i| match kind {
                VolumeKind::Label => (i % 3) as f64,
                VolumeKind::Probability => (i % 10) as f64 / 10.0,
                VolumeKind::Image => (i as f64) * 1.7 - 12.0,
            })
            .collect();
        Volume::new(grid, kind, data).unwrap()
    }

    #[test]
    fn round_trip_is_voxel_identical_for_all_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for (kind, name) in [
            (VolumeKind::Image, "img.nii"),
            (VolumeKind::Label, "lab.nii.gz"),
            (VolumeKind::Probability, "prob.nii"),
        ] {
            let v = sample_volume(kind);
            let path = dir.path().join(name);
            write_volume(&v, &path).unwrap();
            let r = read_volume(&path).unwrap();
            assert_eq!(r.kind(), v.kind());
            assert_eq!(r.dims(), v.dims());
            assert_eq!(r.data(), v.data(), "voxel data must round-trip exactly");
            for a in 0..3 {
                assert!((r.spacing()[a] - v.spacing()[a]).abs() < 1e-6);
                assert!((r.origin()[a] - v.origin()[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anisotropic_median_spacing_survives_round_trip_exactly() {
        // 0.39 x 0.39 x 1.0 mm is not f32-exact; the geometry extension
        // restores the f64 values bit for bit.
        let v = sample_volume(VolumeKind::Image);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aniso.nii");
        write_volume(&v, &path).unwrap();
        let r = read_volume(&path).unwrap();
        assert_eq!(r.spacing(), [0.39, 0.39, 1.0]);
        assert_eq!(r.origin(), v.origin());
        // And the label-resampling path still works on what we read back.
        let down = r.resample([0.78, 0.78, 2.0], Interp::Linear).unwrap();
        assert_eq!(down.dims(), [3, 2, 2]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_volume("/nonexistent/missing.nii").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn malformed_header_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, vec![0u8; 500]).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));

        let short = dir.path().join("short.nii");
        std::fs::write(&short, b"not a nifti").unwrap();
        assert!(matches!(read_volume(&short), Err(Error::Format { .. })));
    }
}
