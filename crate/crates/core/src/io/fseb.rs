//! FSEB: a tiny binary container for one row-major f32 matrix.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FSEB"
//!      4     4  version, u32 LE (= 1)
//!      8     4  rows M, u32 LE
//!     12     4  cols d, u32 LE
//!     16  4*M*d values, f32 LE, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FSEB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Serializes a matrix. Values are narrowed to f32; non-finite values are rejected.
pub fn encode(m: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = match m.shape() {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(n) => (1, n),
        Shape::Scalar => (1, 1),
    };
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::contract(format!("dimension {n} does not fit in u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&dim(rows)?.to_le_bytes());
    buf.extend_from_slice(&dim(cols)?.to_le_bytes());
    for (i, &v) in m.data().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Validation {
                what: "matrix to write".into(),
                detail: format!("non-finite value in row {}", i / cols.max(1)),
            });
        }
        buf.extend_from_slice(&f.to_le_bytes());
    }
    Ok(buf)
}

/// Parses FSEB bytes; `origin` names the source in errors.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: origin.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::SizeMismatch {
            path: origin.to_path_buf(),
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::BadVersion {
            path: origin.to_path_buf(),
            version,
        });
    }
    let (rows, cols) = (word(8) as u64, word(12) as u64);
    let expected = HEADER_LEN as u64 + 4 * rows * cols;
    if expected != bytes.len() as u64 {
        return Err(Error::SizeMismatch {
            path: origin.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut data = Vec::with_capacity(rows * cols);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::Validation {
                what: origin.display().to_string(),
                detail: format!("non-finite value in row {}", i / cols),
            });
        }
        data.push(f64::from(v));
    }
    Ok(Tensor::matrix(rows, cols, data))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_embeddings(m: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(m)?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::contract(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
