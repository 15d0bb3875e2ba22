//! Binary checkpoint container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "MYOD"
//! 4       2     format version, u16 LE
//! 6       1     model kind tag (1 tcn, 2 lstm, 3 svr)
//! 7       1     reserved, 0
//! 8       4     config block length C, u32 LE
//! 12      C     config block
//! 12+C    8     parameter block length P, u64 LE
//! 20+C    P     parameter block
//! 20+C+P  8     FNV-1a 64 of bytes [0, 20+C+P), u64 LE
//! ```
//!
//! Inside the blocks integers are little-endian and reals are IEEE-754
//! binary64, little-endian. Vectors are a u64 length followed by elements.

use std::path::Path;

use thiserror::Error;

use super::fnv1a64;

pub const MAGIC: &[u8; 4] = b"MYOD";
pub const FORMAT_VERSION: u16 = 1;

const HEADER_LEN: usize = 8;
const TRAILER_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (this build reads version {supported})")]
    VersionMismatch { supported: u16, found: u16 },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("{0} trailing bytes after parameter block")]
    TrailingBytes(usize),
}

/// Little-endian field writer for checkpoint blocks.
#[derive(Debug, Default, Clone)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64s(&mut self, v: &[f64]) {
        self.put_u64(v.len() as u64);
        for &x in v {
            self.put_f64(x);
        }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader over one block of a decoded checkpoint.
#[derive(Debug, Clone)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.data.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn get_u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub fn get_u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn get_u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn get_f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn get_f64s(&mut self) -> Result<Vec<f64>, CheckpointError> {
        let n = self.get_u64()? as usize;
        if n > (self.data.len() - self.pos) / 8 {
            return Err(CheckpointError::Truncated);
        }
        (0..n).map(|_| self.get_f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

/// Assembles a complete checkpoint from its config and parameter blocks.
pub fn encode(kind_tag: u8, config: &[u8], params: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 12 + config.len() + params.len() + TRAILER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_tag);
    out.push(0);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(params);
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Validated view of a checkpoint.
#[derive(Debug, Clone)]
pub struct Decoded<'a> {
    pub config: ByteReader<'a>,
    pub params: ByteReader<'a>,
}

/// Validates the container and returns the kind tag with both blocks.
pub fn decode(bytes: &[u8]) -> Result<(u8, Decoded<'_>), CheckpointError> {
    let blocks = decode_blocks(bytes)?;
    Ok((bytes[6], blocks))
}

/// Splits a checkpoint into its config and parameter blocks after checking
/// the header and checksum.
pub fn decode_blocks(bytes: &[u8]) -> Result<Decoded<'_>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 4 + 8 + TRAILER_LEN {
        return Err(CheckpointError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { supported: FORMAT_VERSION, found: version });
    }
    let mut r = ByteReader::new(&bytes[HEADER_LEN..]);
    let clen = r.get_u32()? as usize;
    let config = r.take(clen)?;
    let plen = r.get_u64()? as usize;
    let params = r.take(plen)?;
    let body_end = HEADER_LEN + r.pos;
    let stored = r.get_u64()?;
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    let computed = fnv1a64(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    Ok(Decoded { config: ByteReader::new(config), params: ByteReader::new(params) })
}

/// Writes checkpoint bytes to `path` after validating them.
pub fn checkpoint_write(bytes: &[u8], path: &Path) -> Result<(), super::StorageError> {
    decode_blocks(bytes)?;
    std::fs::write(path, bytes).map_err(|e| super::StorageError::io(path, e))
}

/// Reads and validates checkpoint bytes from `path`.
pub fn checkpoint_read(path: &Path) -> Result<Vec<u8>, super::StorageError> {
    let bytes = std::fs::read(path).map_err(|e| super::StorageError::io(path, e))?;
    decode_blocks(&bytes)?;
    Ok(bytes)
}
