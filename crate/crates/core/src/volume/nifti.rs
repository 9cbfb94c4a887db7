//! Minimal NIfTI-1 single-file reader and writer (`.nii`, `.nii.gz`).
//!
//! Only what the pipeline needs: scalar payloads of the common datatypes,
//! scaling, sform/qform affines and the description field.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::{Compression, GzBuilder};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;
pub const DT_FLOAT64: i16 = 64;
pub const DT_INT8: i16 = 256;
pub const DT_UINT16: i16 = 512;
pub const DT_UINT32: i16 = 768;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for NiftiHeader {
    fn default() -> Self {
        NiftiHeader {
            dim: [3, 1, 1, 1, 1, 1, 1, 1],
            datatype: DT_FLOAT32,
            bitpix: 32,
            pixdim: [1.0; 8],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            // millimetres + seconds
            xyzt_units: 2 | 8,
            descrip: String::new(),
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }
}

/// Decoded voxel payload in file (x-fastest) order.
#[derive(Debug, Clone)]
pub enum Payload {
    Float32(Vec<f32>),
    Float64(Vec<f64>),
    Int(Vec<i64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Float32(v) => v.len(),
            Payload::Float64(v) => v.len(),
            Payload::Int(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn bytes_per_voxel(datatype: i16) -> Result<usize> {
    Ok(match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut raw = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(Cursor::new(raw))
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse_header<B: ByteOrder>(path: &Path, buf: &[u8]) -> Result<NiftiHeader> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut c = Cursor::new(buf);
    let mut h = NiftiHeader::default();
    c.set_position(40);
    for d in h.dim.iter_mut() {
        *d = c.read_i16::<B>().unwrap();
    }
    c.set_position(70);
    h.datatype = c.read_i16::<B>().unwrap();
    h.bitpix = c.read_i16::<B>().unwrap();
    c.set_position(76);
    for p in h.pixdim.iter_mut() {
        *p = c.read_f32::<B>().unwrap();
    }
    h.vox_offset = c.read_f32::<B>().unwrap();
    h.scl_slope = c.read_f32::<B>().unwrap();
    h.scl_inter = c.read_f32::<B>().unwrap();
    h.xyzt_units = buf[123];
    let descrip = &buf[148..228];
    let end = descrip.iter().position(|&b| b == 0).unwrap_or(descrip.len());
    h.descrip = String::from_utf8_lossy(&descrip[..end]).into_owned();
    c.set_position(252);
    h.qform_code = c.read_i16::<B>().unwrap();
    h.sform_code = c.read_i16::<B>().unwrap();
    for q in h.quatern.iter_mut() {
        *q = c.read_f32::<B>().unwrap();
    }
    for q in h.qoffset.iter_mut() {
        *q = c.read_f32::<B>().unwrap();
    }
    for row in h.srow.iter_mut() {
        for v in row.iter_mut() {
            *v = c.read_f32::<B>().unwrap();
        }
    }
    let magic = &buf[344..348];
    if magic != b"n+1\0" {
        return Err(malformed(format!(
            "magic {:?} is not a single-file NIfTI-1 signature",
            String::from_utf8_lossy(magic)
        )));
    }
    if !(1..=7).contains(&h.dim[0]) {
        return Err(malformed(format!("dim[0] = {} out of range", h.dim[0])));
    }
    for i in 1..=h.dim[0] as usize {
        if h.dim[i] < 1 {
            return Err(malformed(format!("dim[{i}] = {} must be positive", h.dim[i])));
        }
    }
    if h.vox_offset < HEADER_SIZE as f32 {
        return Err(malformed(format!("vox_offset {} inside header", h.vox_offset)));
    }
    Ok(h)
}

fn decode<B: ByteOrder>(datatype: i16, bytes: &[u8], n: usize) -> Result<Payload> {
    let mut c = Cursor::new(bytes);
    let ints = |f: &mut dyn FnMut(&mut Cursor<&[u8]>) -> i64, c: &mut Cursor<&[u8]>| {
        (0..n).map(|_| f(c)).collect::<Vec<_>>()
    };
    Ok(match datatype {
        DT_FLOAT32 => {
            let mut v = vec![0f32; n];
            c.read_f32_into::<B>(&mut v).unwrap();
            Payload::Float32(v)
        }
        DT_FLOAT64 => {
            let mut v = vec![0f64; n];
            c.read_f64_into::<B>(&mut v).unwrap();
            Payload::Float64(v)
        }
        DT_UINT8 => Payload::Int(bytes[..n].iter().map(|&b| b as i64).collect()),
        DT_INT8 => Payload::Int(bytes[..n].iter().map(|&b| b as i8 as i64).collect()),
        DT_INT16 => Payload::Int(ints(&mut |c| c.read_i16::<B>().unwrap() as i64, &mut c)),
        DT_UINT16 => Payload::Int(ints(&mut |c| c.read_u16::<B>().unwrap() as i64, &mut c)),
        DT_INT32 => Payload::Int(ints(&mut |c| c.read_i32::<B>().unwrap() as i64, &mut c)),
        DT_UINT32 => Payload::Int(ints(&mut |c| c.read_u32::<B>().unwrap() as i64, &mut c)),
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

/// Reads a NIfTI-1 file. The payload is returned in file order with
/// `scl_slope`/`scl_inter` applied to floating-point data.
pub fn read(path: &Path) -> Result<(NiftiHeader, Payload)> {
    let buf = read_all(path)?;
    if buf.len() < HEADER_SIZE + 4 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("file is {} bytes, shorter than a header", buf.len()),
        });
    }
    let little = LittleEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let big = BigEndian::read_i32(&buf[0..4]) == HEADER_SIZE as i32;
    let header = if little {
        parse_header::<LittleEndian>(path, &buf)?
    } else if big {
        parse_header::<BigEndian>(path, &buf)?
    } else {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "sizeof_hdr is not 348".into(),
        });
    };
    let n: usize = (1..=header.dim[0] as usize)
        .map(|i| header.dim[i] as usize)
        .product();
    let bpv = bytes_per_voxel(header.datatype)?;
    let start = header.vox_offset as usize;
    let end = start + n * bpv;
    if buf.len() < end {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("payload truncated: need {end} bytes, file has {}", buf.len()),
        });
    }
    let bytes = &buf[start..end];
    let mut payload = if little {
        decode::<LittleEndian>(header.datatype, bytes, n)?
    } else {
        decode::<BigEndian>(header.datatype, bytes, n)?
    };
    let scaled = header.scl_slope != 0.0 && !(header.scl_slope == 1.0 && header.scl_inter == 0.0);
    if scaled {
        let (s, i) = (header.scl_slope as f64, header.scl_inter as f64);
        payload = match payload {
            Payload::Float32(v) => {
                Payload::Float64(v.into_iter().map(|x| x as f64 * s + i).collect())
            }
            Payload::Float64(v) => Payload::Float64(v.into_iter().map(|x| x * s + i).collect()),
            Payload::Int(v) => Payload::Float64(v.into_iter().map(|x| x as f64 * s + i).collect()),
        };
    }
    Ok((header, payload))
}

/// Writes a little-endian single-file NIfTI-1. `payload` must already be the
/// raw little-endian bytes matching `header.datatype`. Gzip is used when the
/// path ends in `.gz`; the gzip header carries no timestamp so identical
/// inputs produce identical files.
pub fn write(path: &Path, header: &NiftiHeader, payload: &[u8]) -> Result<()> {
    let mut buf = Vec::with_capacity(VOX_OFFSET + payload.len());
    buf.write_i32::<LittleEndian>(HEADER_SIZE as i32).unwrap();
    buf.resize(40, 0);
    for d in header.dim {
        buf.write_i16::<LittleEndian>(d).unwrap();
    }
    buf.resize(70, 0);
    buf.write_i16::<LittleEndian>(header.datatype).unwrap();
    buf.write_i16::<LittleEndian>(header.bitpix).unwrap();
    buf.resize(76, 0);
    for p in header.pixdim {
        buf.write_f32::<LittleEndian>(p).unwrap();
    }
    buf.write_f32::<LittleEndian>(VOX_OFFSET as f32).unwrap();
    buf.write_f32::<LittleEndian>(header.scl_slope).unwrap();
    buf.write_f32::<LittleEndian>(header.scl_inter).unwrap();
    buf.resize(123, 0);
    buf.push(header.xyzt_units);
    buf.resize(148, 0);
    let mut descrip = header.descrip.as_bytes().to_vec();
    descrip.truncate(79);
    descrip.resize(80, 0);
    buf.extend_from_slice(&descrip);
    buf.resize(252, 0);
    buf.write_i16::<LittleEndian>(header.qform_code).unwrap();
    buf.write_i16::<LittleEndian>(header.sform_code).unwrap();
    for q in header.quatern.iter().chain(header.qoffset.iter()) {
        buf.write_f32::<LittleEndian>(*q).unwrap();
    }
    for row in header.srow {
        for v in row {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
    }
    buf.resize(344, 0);
    buf.extend_from_slice(b"n+1\0");
    buf.extend_from_slice(&[0, 0, 0, 0]);
    debug_assert_eq!(buf.len(), VOX_OFFSET);
    buf.extend_from_slice(payload);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc: GzEncoder<BufWriter<File>> =
            GzBuilder::new().mtime(0).write(BufWriter::new(file), Compression::new(6));
        enc.write_all(&buf).map_err(|e| Error::io(path, e))?;
        enc.finish()
            .and_then(|mut w| w.flush())
            .map_err(|e| Error::io(path, e))?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(&buf)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Voxel-to-world affine (3 rows of 4) implied by the header: sform if set,
/// otherwise qform, otherwise plain pixdim scaling.
pub fn header_affine(h: &NiftiHeader) -> [[f64; 4]; 3] {
    if h.sform_code > 0 {
        let mut a = [[0.0; 4]; 3];
        for (r, row) in h.srow.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                a[r][c] = *v as f64;
            }
        }
        return a;
    }
    let (dx, dy, dz) = (h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64);
    if h.qform_code > 0 {
        let [b, c, d] = h.quatern.map(|v| v as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let s = [dx, dy, dz * qfac];
        let mut out = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = r[i][j] * s[j];
            }
            out[i][3] = h.qoffset[i] as f64;
        }
        return out;
    }
    [[dx, 0.0, 0.0, 0.0], [0.0, dy, 0.0, 0.0], [0.0, 0.0, dz, 0.0]]
}

pub fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    out
}
