//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Volumes are written as FLOAT64 so a write/read round trip is value-identical; masks as UINT8.
//! Spacing comes from `pixdim[1..4]`, origin from the qform offsets. Grids are x-fastest, which
//! is the on-disk NIfTI order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::imaging::{Geometry, Grid3, LabelMask, LabelScheme, Volume3D};

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    if is_gz(path) {
        GzDecoder::new(BufReader::new(f)).read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    } else {
        BufReader::new(f).read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    }
    Ok(buf)
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(BufWriter::new(f), Compression::default());
        enc.write_all(bytes).map_err(|e| io_err(path, e))?;
        enc.finish().and_then(|mut w| w.flush()).map_err(|e| io_err(path, e))?;
    } else {
        let mut w = BufWriter::new(f);
        w.write_all(bytes).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Header fields this crate reads back.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub datatype: i16,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub scl_slope: f64,
    pub scl_inter: f64,
    pub vox_offset: usize,
    pub little_endian: bool,
}

struct Cursor<'a> {
    buf: &'a [u8],
    le: bool,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().expect("in-bounds header read");
        if !self.le {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

pub fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Nifti(format!("file too short for a header ({} bytes)", buf.len())));
    }
    let le = i32::from_le_bytes(buf[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32;
    let be = i32::from_be_bytes(buf[0..4].try_into().expect("4 bytes")) == HEADER_SIZE as i32;
    if !le && !be {
        return Err(Error::Nifti("sizeof_hdr is not 348; not a NIfTI-1 file".into()));
    }
    let magic = &buf[344..348];
    if magic != b"n+1\0" {
        return Err(Error::Nifti(format!("unsupported magic {magic:?}; only single-file NIfTI-1 is handled")));
    }
    let c = Cursor { buf, le };
    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Nifti(format!("dim[0] = {ndim} out of range")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take((ndim as usize).min(3)) {
        let v = c.i16(42 + 2 * a);
        if v < 1 {
            return Err(Error::Nifti(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if c.i16(42 + 2 * a) > 1 {
            return Err(Error::Nifti("only 3D images are supported".into()));
        }
    }
    let spacing = [0, 1, 2].map(|a| f64::from(c.f32(80 + 4 * a)).abs());
    let qform = c.i16(252);
    let sform = c.i16(254);
    let origin = if qform > 0 {
        [0, 1, 2].map(|a| f64::from(c.f32(268 + 4 * a)))
    } else if sform > 0 {
        [0, 1, 2].map(|a| f64::from(c.f32(280 + 16 * a + 12)))
    } else {
        [0.0; 3]
    };
    let vox = c.f32(108);
    Ok(Header {
        dims,
        datatype: c.i16(70),
        spacing,
        origin,
        scl_slope: f64::from(c.f32(112)),
        scl_inter: f64::from(c.f32(116)),
        vox_offset: if vox < DATA_OFFSET as f32 { DATA_OFFSET } else { vox as usize },
        little_endian: le,
    })
}

fn decode(header: &Header, buf: &[u8]) -> Result<Vec<f64>> {
    let n: usize = header.dims.iter().product();
    let width = match header.datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Nifti(format!("unsupported datatype code {other}"))),
    };
    let body = buf
        .get(header.vox_offset..header.vox_offset + n * width)
        .ok_or_else(|| Error::Nifti(format!("truncated voxel data: need {} bytes", n * width)))?;
    let le = header.little_endian;
    let pick = |chunk: &[u8]| -> Vec<u8> {
        let mut b = chunk.to_vec();
        if !le {
            b.reverse();
        }
        b
    };
    let raw: Vec<f64> = body
        .chunks_exact(width)
        .map(|ch| {
            let b = pick(ch);
            match header.datatype {
                DT_UINT8 => f64::from(b[0]),
                DT_INT8 => f64::from(b[0] as i8),
                DT_INT16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
                DT_UINT16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
                DT_INT32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                DT_FLOAT32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
                _ => f64::from_le_bytes(b.try_into().expect("8 bytes")),
            }
        })
        .collect();
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        return Ok(raw.into_iter().map(|v| v * slope + inter).collect());
    }
    Ok(raw)
}

fn encode_header(dims: [usize; 3], datatype: i16, bitpix: i16, geometry: &Geometry) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], at: usize, v: f32| h[at..at + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for (a, &d) in dims.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| Error::Nifti(format!("dimension {d} exceeds NIfTI-1 limits")))?;
        put_i16(&mut h, 42 + 2 * a, d);
    }
    for a in 3..7 {
        put_i16(&mut h, 42 + 2 * a, 1);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, geometry.spacing[a] as f32);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, geometry.origin[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 4 * a, geometry.spacing[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 12, geometry.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    decode_volume(&read_all(path)?)
}

/// Volume from uncompressed NIfTI-1 bytes.
pub fn decode_volume(buf: &[u8]) -> Result<Volume3D> {
    let header = parse_header(buf)?;
    let data = decode(&header, buf)?;
    let geometry = Geometry::new(header.spacing, header.origin)?;
    Volume3D::new(Grid3::from_vec(header.dims, data)?, geometry)
}

pub fn read_mask(path: &Path, scheme: LabelScheme) -> Result<LabelMask> {
    let buf = read_all(path)?;
    let header = parse_header(&buf)?;
    let data = decode(&header, &buf)?;
    let labels = data
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=f64::from(u8::MAX)).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Nifti(format!("mask value {v} is not a label")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMask::new(Grid3::from_vec(header.dims, labels)?, scheme, Geometry::new(header.spacing, header.origin)?)
}

/// Uncompressed single-file NIfTI-1 bytes of a volume.
pub fn encode_volume(vol: &Volume3D) -> Result<Vec<u8>> {
    let mut bytes = encode_header(vol.dims(), DT_FLOAT64, 64, &vol.geometry)?;
    bytes.reserve(vol.grid.len() * 8);
    for v in vol.grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(bytes)
}

pub fn encode_mask(mask: &LabelMask) -> Result<Vec<u8>> {
    let mut bytes = encode_header(mask.dims(), DT_UINT8, 8, &mask.geometry)?;
    bytes.extend_from_slice(mask.grid.data());
    Ok(bytes)
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_all(path, &encode_volume(vol)?)
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write_all(path, &encode_mask(mask)?)
}

/// Write a bare grid with the given geometry (used for patch channels and heatmaps).
pub fn write_grid(path: &Path, grid: &Grid3<f64>, geometry: &Geometry) -> Result<()> {
    write_volume(path, &Volume3D { grid: grid.clone(), geometry: *geometry })
}
