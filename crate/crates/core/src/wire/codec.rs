//! `.fedw` parameter blobs.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "FEDW" | version u16 | dtype u8 | entry_count u32
//! per entry: name_len u16 | name (UTF-8) | ndim u8 | dims u32 * ndim | elements
//! CRC32 (IEEE) of everything above
//! ```

use super::WireError;
use crate::nn::{ParamSet, Tensor};

pub const PARAM_MAGIC: [u8; 4] = *b"FEDW";
pub const PARAM_VERSION: u16 = 1;
/// Magic, version, dtype, entry count and CRC.
pub const EMPTY_BLOB_LEN: usize = 4 + 2 + 1 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    #[default]
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::F32),
            1 => Some(Self::F64),
            _ => None,
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

/// Exact encoded length of `params` at `dtype`.
pub fn blob_len(params: &ParamSet, dtype: Dtype) -> usize {
    EMPTY_BLOB_LEN
        + params
            .iter()
            .map(|(name, t)| 2 + name.len() + 1 + 4 * t.dims().len() + dtype.elem_size() * t.len())
            .sum::<usize>()
}

pub fn encode_params(params: &ParamSet, dtype: Dtype) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(blob_len(params, dtype));
    out.extend_from_slice(&PARAM_MAGIC);
    out.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    out.push(dtype as u8);
    let count = u32::try_from(params.len()).map_err(|_| WireError::Encoding("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| WireError::NameTooLong(name.len()))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(tensor.dims().len())
            .map_err(|_| WireError::Encoding(format!("{name}: {} dims", tensor.dims().len())))?;
        out.push(ndim);
        for &d in tensor.dims() {
            let d = u32::try_from(d).map_err(|_| WireError::Encoding(format!("{name}: dim {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match dtype {
            Dtype::F32 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Bounds-checked little-endian reader.
pub(crate) struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a blob, widening F32 payloads to `f64`. Returns the payload dtype too.
pub fn decode_params_with_dtype(blob: &[u8]) -> Result<(ParamSet, Dtype), WireError> {
    let mut cur = Cursor::new(blob);
    let magic = cur.take(4)?;
    if magic != PARAM_MAGIC {
        return Err(WireError::BadMagic {
            expected: PARAM_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u16()?;
    if version != PARAM_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let code = cur.u8()?;
    let dtype = Dtype::from_code(code).ok_or(WireError::UnknownDtype(code))?;
    let count = cur.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| WireError::Malformed("entry name is not UTF-8".into()))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(WireError::Malformed(format!("entry {name:?} has a zero dimension")));
            }
            dims.push(d);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| WireError::Malformed(format!("entry {name:?} element count overflows")))?;
        let bytes = n
            .checked_mul(dtype.elem_size())
            .ok_or_else(|| WireError::Malformed(format!("entry {name:?} byte count overflows")))?;
        let raw = cur.take(bytes)?;
        let data: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let tensor = Tensor::new(dims, data).map_err(|e| WireError::Malformed(e.to_string()))?;
        entries.push((name, tensor));
    }
    let body_end = cur.position();
    let stored = cur.u32()?;
    if cur.remaining() != 0 {
        return Err(WireError::TrailingBytes(cur.remaining()));
    }
    let computed = crc32fast::hash(&blob[..body_end]);
    if stored != computed {
        return Err(WireError::ChecksumMismatch { stored, computed });
    }
    let params = ParamSet::new(entries).map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok((params, dtype))
}

pub fn decode_params(blob: &[u8]) -> Result<ParamSet, WireError> {
    decode_params_with_dtype(blob).map(|(p, _)| p)
}

/// What a receiver sees after `params` crosses the wire at `dtype`.
pub fn quantize(params: &ParamSet, dtype: Dtype) -> Result<ParamSet, WireError> {
    match dtype {
        Dtype::F64 => Ok(params.clone()),
        Dtype::F32 => decode_params(&encode_params(params, dtype)?),
    }
}
