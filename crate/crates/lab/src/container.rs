//! Self-describing binary container shared by datasets, noise states and
//! checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | field      | bytes               |
//! |------------|---------------------|
//! | magic      | 8, `NOISEMIA`       |
//! | version    | u16                 |
//! | kind       | u8                  |
//! | dtype      | u8, `0x08` for f64  |
//! | digest     | 32, SHA-256 of the producing config |
//! | int count  | u64                 |
//! | ints       | u64 each            |
//! | rank       | u8                  |
//! | shape      | u64 each            |
//! | payload    | f64 each, row-major |
//! | crc32      | u32 over everything above |

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 8] = *b"NOISEMIA";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 0x08;

pub type Digest = [u8; 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Dataset = 1,
    NoiseStates = 2,
    Checkpoint = 3,
}

impl Kind {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Kind::Dataset),
            2 => Some(Kind::NoiseStates),
            3 => Some(Kind::Checkpoint),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a noisemia container")]
    BadMagic,
    #[error("container version {found}, this build reads {VERSION}")]
    Version { found: u16 },
    #[error("expected a {expected:?} container, found tag {found}")]
    WrongKind { expected: Kind, found: u8 },
    #[error("unsupported dtype tag {0:#04x}")]
    Dtype(u8),
    #[error("file truncated")]
    Truncated,
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("invalid contents: {0}")]
    Invalid(String),
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub digest: Digest,
    pub ints: Vec<u64>,
    pub shape: Vec<u64>,
    pub data: Vec<f64>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>, FormatError> {
        let expected: u64 = self.shape.iter().product();
        if expected != self.data.len() as u64 {
            return Err(FormatError::Invalid(format!(
                "shape {:?} holds {expected} values, payload has {}",
                self.shape,
                self.data.len()
            )));
        }
        let rank = u8::try_from(self.shape.len()).map_err(|_| FormatError::Invalid("rank above 255".into()))?;
        let mut out = Vec::with_capacity(64 + 8 * (self.ints.len() + self.shape.len() + self.data.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(DTYPE_F64);
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.ints.len() as u64).to_le_bytes());
        for v in &self.ints {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(rank);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], expected: Kind) -> Result<Self, FormatError> {
        if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        if bytes.len() < MAGIC.len() + 2 + 4 {
            return Err(FormatError::Truncated);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = u16::from_le_bytes(r.take::<2>()?);
        if version != VERSION {
            return Err(FormatError::Version { found: version });
        }
        let stored = u32::from_le_bytes(trailer.try_into().expect("four bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(FormatError::Checksum { stored, computed });
        }
        let [kind_tag] = r.take::<1>()?;
        let kind = Kind::from_tag(kind_tag).filter(|k| *k == expected);
        let kind = kind.ok_or(FormatError::WrongKind { expected, found: kind_tag })?;
        let [dtype] = r.take::<1>()?;
        if dtype != DTYPE_F64 {
            return Err(FormatError::Dtype(dtype));
        }
        let digest = r.take::<32>()?;
        let n_ints = r.len_prefix()?;
        let ints = (0..n_ints).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let [rank] = r.take::<1>()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
        let count = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Invalid("shape overflows".into()))?;
        let remaining = (body.len() - r.pos) as u64;
        if count.checked_mul(8).is_none_or(|b| b > remaining) {
            return Err(FormatError::Truncated);
        }
        let data = (0..count).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>, _>>()?;
        if r.pos != body.len() {
            return Err(FormatError::Trailing(body.len() - r.pos));
        }
        Ok(Container { kind, digest, ints, shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path, expected: Kind) -> Result<Self, FormatError> {
        Self::decode(&fs::read(path)?, expected)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        let end = self.pos.checked_add(N).filter(|&e| e <= self.buf.len()).ok_or(FormatError::Truncated)?;
        let out = self.buf[self.pos..end].try_into().expect("length checked");
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take::<8>()?))
    }

    /// A count of following u64 values, checked against the bytes left.
    fn len_prefix(&mut self) -> Result<u64, FormatError> {
        let n = self.u64()?;
        if n.checked_mul(8).is_none_or(|b| b > (self.buf.len() - self.pos) as u64) {
            return Err(FormatError::Truncated);
        }
        Ok(n)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| FormatError::Io(e.error))?;
    Ok(())
}
