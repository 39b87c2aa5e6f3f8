//! Little-endian binary helpers and the `FLCK` named-tensor blob format.
//!
//! ```text
//! "FLCK"            4 bytes
//! version           u32 (= 1)
//! n                 u32
//! n × { len u32, name utf-8 bytes }
//! n × { rows u32, cols u32, rows·cols × f32 row-major }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::UnexpectedEof)?;
        if end > self.buf.len() {
            return Err(Error::UnexpectedEof);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// `rows × cols` little-endian f32 values widened to f64.
    pub fn f32_matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or(Error::UnexpectedEof)?;
        let bytes = self.take(n.checked_mul(4).ok_or(Error::UnexpectedEof)?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|_| Error::Malformed("non-finite payload".into()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32_matrix(out: &mut Vec<u8>, m: &Matrix) {
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn dim_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidParameter(format!("{what} {n} exceeds u32")))
}

/// Writes through a temporary file in the destination directory and
/// renames it into place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Ordered list of named matrices stored in `FLCK` form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix) {
        self.entries.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name).ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, dim_u32(self.entries.len(), "entry count")?);
        for (name, _) in &self.entries {
            put_u32(&mut out, dim_u32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
        }
        for (_, m) in &self.entries {
            put_u32(&mut out, dim_u32(m.rows(), "rows")?);
            put_u32(&mut out, dim_u32(m.cols(), "cols")?);
            put_f32_matrix(&mut out, m);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4).map_err(|_| Error::NotACheckpoint)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::NotACheckpoint);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let mut names = Vec::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::Malformed("parameter name is not utf-8".into()))?;
            names.push(name.to_string());
        }
        let mut entries = Vec::with_capacity(n);
        for name in names {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            entries.push((name, r.f32_matrix(rows, cols)?));
        }
        if !r.is_at_end() {
            return Err(Error::Malformed("trailing bytes after checkpoint".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
