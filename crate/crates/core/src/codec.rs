//! Little-endian binary container shared by the backbone and pool checkpoints.
//!
//! ```text
//! magic[4] | u32 version | body ... | u32 crc32(magic..body)
//! ```
//!
//! The body is a sequence of `u32` words and named `f64` blobs:
//!
//! ```text
//! blob := u32 name_len | name (utf-8) | u32 rank | rank x u32 dim | prod(dim) x f64
//! ```

use crate::numerics::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodecError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { found: Vec<u8>, expected: Vec<u8> },
    #[error("unsupported version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("file truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("corrupt field at byte {offset}: {detail}")]
    Corrupt { offset: usize, detail: String },
}

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&version.to_le_bytes());
        Self { buf }
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn blob(&mut self, name: &str, t: &Tensor) -> &mut Self {
        self.u32(name.len() as u32);
        self.buf.extend_from_slice(name.as_bytes());
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

pub struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    /// Validates magic, checksum and version before handing out the body.
    pub fn open(bytes: &'b [u8], magic: &[u8; 4], version: u32) -> Result<Self, CodecError> {
        if bytes.len() < 12 {
            return Err(CodecError::Truncated {
                offset: bytes.len(),
                what: "header",
            });
        }
        if &bytes[..4] != magic {
            return Err(CodecError::Magic {
                found: bytes[..4].to_vec(),
                expected: magic.to_vec(),
            });
        }
        let split = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[split..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..split]);
        if stored != computed {
            return Err(CodecError::Checksum { stored, computed });
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if found != version {
            return Err(CodecError::Version {
                found,
                expected: version,
            });
        }
        Ok(Self {
            bytes: &bytes[..split],
            pos: 8,
        })
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'b [u8], CodecError> {
        if self.bytes.len() - self.pos < n {
            return Err(CodecError::Truncated {
                offset: self.pos,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// Reads a blob and checks its name.
    pub fn blob(&mut self, expected_name: &str) -> Result<Tensor, CodecError> {
        let start = self.pos;
        let len = self.u32("blob name length")? as usize;
        let name = self.take(len, "blob name")?;
        if name != expected_name.as_bytes() {
            return Err(CodecError::Corrupt {
                offset: start,
                detail: format!(
                    "expected blob {expected_name:?}, found {:?}",
                    String::from_utf8_lossy(name)
                ),
            });
        }
        let rank = self.u32("blob rank")? as usize;
        if rank > 8 {
            return Err(CodecError::Corrupt {
                offset: start,
                detail: format!("blob {expected_name:?} has rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("blob dims")? as usize);
        }
        let count: usize = shape.iter().product();
        let raw = self.take(count.saturating_mul(8), "blob values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| CodecError::Corrupt {
            offset: start,
            detail: e.to_string(),
        })
    }

    pub fn finish(self) -> Result<(), CodecError> {
        if self.pos != self.bytes.len() {
            return Err(CodecError::Corrupt {
                offset: self.pos,
                detail: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}
