//! Minimal binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 0..4         | magic `OCT1`                             |
//! | 4            | dtype code: 0 = u8, 1 = u16, 2 = f32     |
//! | 5            | ndim (1..=4)                             |
//! | 6..6+4*ndim  | extents as u32, row-major (slowest first)|
//! | rest         | payload, `product(dims)` values          |

use std::fs;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"OCT1";
pub const FORMAT_VERSION: &str = "OCT1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}, expected \"OCT1\"")]
    BadMagic([u8; 4]),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated tensor file: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid shape {dims:?}: {reason}")]
    BadShape { dims: Vec<usize>, reason: &'static str },
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype { expected: DType, found: DType },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    U8,
    U16,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::U16 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(DType::U8),
            1 => Ok(DType::U16),
            2 => Ok(DType::F32),
            c => Err(TensorError::BadDtype(c)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U16 => 2,
            DType::F32 => 4,
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::U8 => "u8",
            DType::U16 => "u16",
            DType::F32 => "f32",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::U16(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::U16(_) => DType::U16,
            TensorData::F32(_) => DType::F32,
        }
    }
}

/// A shaped, typed array as stored on disk.
#[derive(Debug, Clone)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

impl PartialEq for TensorFile {
    /// Byte-level equality (NaN payloads compare by bit pattern).
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.to_bytes() == other.to_bytes()
    }
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        validate_dims(&dims)?;
        let count: usize = dims.iter().product();
        if count != data.len() {
            return Err(TensorError::BadShape {
                dims,
                reason: "value count does not match product of extents",
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::F32(values))
    }

    pub fn from_u16(dims: Vec<usize>, values: Vec<u16>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U16(values))
    }

    pub fn from_u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::U8(values))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_f32(self) -> Result<(Vec<usize>, Vec<f32>), TensorError> {
        match self.data {
            TensorData::F32(v) => Ok((self.dims, v)),
            other => Err(TensorError::WrongDtype {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_u16(self) -> Result<(Vec<usize>, Vec<u16>), TensorError> {
        match self.data {
            TensorData::U16(v) => Ok((self.dims, v)),
            other => Err(TensorError::WrongDtype {
                expected: DType::U16,
                found: other.dtype(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dtype = self.dtype();
        let mut out =
            Vec::with_capacity(6 + 4 * self.dims.len() + self.data.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < 6 {
            return Err(TensorError::Truncated {
                expected: 6,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
        if &magic != MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(TensorError::Truncated {
                expected: header,
                found: bytes.len(),
            });
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")) as usize)
            .collect();
        validate_dims(&dims)?;
        let count: usize = dims.iter().product();
        let expected = header + count * dtype.size();
        if bytes.len() < expected {
            return Err(TensorError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(TensorError::TrailingBytes(bytes.len() - expected));
        }
        let payload = &bytes[header..];
        let data = match dtype {
            DType::U8 => TensorData::U8(payload.to_vec()),
            DType::U16 => TensorData::U16(
                payload
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes([c[0], c[1]]))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
        };
        Ok(Self { dims, data })
    }
}

fn validate_dims(dims: &[usize]) -> Result<(), TensorError> {
    if dims.is_empty() || dims.len() > 4 {
        return Err(TensorError::BadShape {
            dims: dims.to_vec(),
            reason: "ndim must be in 1..=4",
        });
    }
    if dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
        return Err(TensorError::BadShape {
            dims: dims.to_vec(),
            reason: "extents must be in 1..=u32::MAX",
        });
    }
    Ok(())
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<(), TensorError> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile, TensorError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    TensorFile::from_bytes(&bytes)
}
