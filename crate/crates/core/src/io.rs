//! DPT tensor files and PGM label-map export.
//!
//! DPT layout: `b"DPT1"`, version `u8 = 1`, dtype `u8 = 0` (f64), `ndim: u8`,
//! reserved `u8 = 0`, then `ndim` little-endian `u64` dims and a row-major
//! little-endian `f64` payload. Writes go to a sibling temp file that is
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{LabelMap, Tensor};

pub const DPT_MAGIC: [u8; 4] = *b"DPT1";
pub const DPT_VERSION: u8 = 1;
pub const DPT_DTYPE_F64: u8 = 0;
const HEADER_LEN: usize = 8;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected \"DPT1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version: {found} (expected 1)")]
    UnsupportedVersion { found: u8 },
    #[error("unsupported dtype: {found} (only 0 = f64 is supported)")]
    UnsupportedDtype { found: u8 },
    #[error("reserved byte must be 0, found {found}")]
    Reserved { found: u8 },
    #[error("ndim must be at least 1")]
    ZeroRank,
    #[error("truncated header: expected {expected} bytes, found {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} payload bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("dims {dims:?} overflow the addressable size")]
    Overflow { dims: Vec<u64> },
    #[error("tensor rejected: {0}")]
    Tensor(#[from] crate::error::Error),
    #[error("too many dimensions for DPT: {0} (max 255)")]
    TooManyDims(usize),
    #[error("PGM export supports at most 256 classes, got {0}")]
    TooManyClasses(usize),
    #[error("label map has {pixels} pixels, not {height}x{width}")]
    Geometry { pixels: usize, height: usize, width: usize },
    #[error("malformed PGM: {0}")]
    Pgm(String),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temp file in the same directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| IoError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"),
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn encode_tensor(t: &Tensor) -> IoResult<Vec<u8>> {
    let ndim = t.dims().len();
    if ndim > u8::MAX as usize {
        return Err(IoError::TooManyDims(ndim));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * ndim + 8 * t.len());
    out.extend_from_slice(&DPT_MAGIC);
    out.extend_from_slice(&[DPT_VERSION, DPT_DTYPE_F64, ndim as u8, 0]);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> IoResult<Tensor> {
    if bytes.len() < 4 || bytes[..4] != DPT_MAGIC {
        return Err(IoError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(IoError::TruncatedHeader {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let (version, dtype, ndim, reserved) = (bytes[4], bytes[5], bytes[6] as usize, bytes[7]);
    if version != DPT_VERSION {
        return Err(IoError::UnsupportedVersion { found: version });
    }
    if dtype != DPT_DTYPE_F64 {
        return Err(IoError::UnsupportedDtype { found: dtype });
    }
    if reserved != 0 {
        return Err(IoError::Reserved { found: reserved });
    }
    if ndim == 0 {
        return Err(IoError::ZeroRank);
    }
    let header = HEADER_LEN + 8 * ndim;
    if bytes.len() < header {
        return Err(IoError::TruncatedHeader {
            expected: header,
            actual: bytes.len(),
        });
    }
    let raw_dims: Vec<u64> = bytes[HEADER_LEN..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let expected = raw_dims
        .iter()
        .try_fold(8usize, |acc, &d| usize::try_from(d).ok().and_then(|d| acc.checked_mul(d)))
        .ok_or_else(|| IoError::Overflow { dims: raw_dims.clone() })?;
    let actual = bytes.len() - header;
    if actual < expected {
        return Err(IoError::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(IoError::TrailingData { expected, actual });
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let dims = raw_dims.into_iter().map(|d| d as usize).collect();
    Ok(Tensor::new(dims, data)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> IoResult<()> {
    write_atomic(path.as_ref(), &encode_tensor(t)?)
}

pub fn read_tensor(path: impl AsRef<Path>) -> IoResult<Tensor> {
    let path = path.as_ref();
    decode_tensor(&fs::read(path).map_err(io_err(path))?)
}

/// Gray level of `class`: `floor(class · 255 / (C − 1))`, or 0 when `C = 1`.
pub fn class_gray_level(class: usize, classes: usize) -> u8 {
    if classes <= 1 {
        0
    } else {
        (class * 255 / (classes - 1)) as u8
    }
}

/// Binary P5 encoding of a label map laid out row-major as `height × width`.
pub fn encode_pgm(labels: &LabelMap, height: usize, width: usize) -> IoResult<Vec<u8>> {
    let c = labels.classes();
    if c > 256 {
        return Err(IoError::TooManyClasses(c));
    }
    if height * width != labels.pixels() {
        return Err(IoError::Geometry {
            pixels: labels.pixels(),
            height,
            width,
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(labels.labels().iter().map(|&k| class_gray_level(k, c)));
    Ok(out)
}

pub fn export_pgm(labels: &LabelMap, height: usize, width: usize, path: impl AsRef<Path>) -> IoResult<()> {
    write_atomic(path.as_ref(), &encode_pgm(labels, height, width)?)
}

/// A decoded 8-bit P5 image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parses a P5 file with `maxval ≤ 255`. Comments in the header are skipped.
pub fn decode_pgm(bytes: &[u8]) -> IoResult<GrayImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Pgm("header ended early".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates maxval from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(IoError::Pgm(format!("magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| IoError::Pgm(format!("bad number {s:?}")));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(IoError::Pgm(format!("maxval {maxval}")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height {
        return Err(IoError::Pgm(format!("raster has {} bytes, need {}", raster.len(), width * height)));
    }
    Ok(GrayImage {
        width,
        height,
        pixels: raster.to_vec(),
    })
}

pub fn read_pgm(path: impl AsRef<Path>) -> IoResult<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(io_err(path))?)
}
