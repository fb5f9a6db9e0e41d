use std::ffi::OsString;
use std::path::{Path, PathBuf};

use super::{f32_values, format_error, io_error, read_file, write_atomic, PersistError, Reader};
use crate::tasks::EmbeddingMatrix;

const MAGIC: &[u8; 4] = b"AVSE";
const VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 16;

/// The sentence file that accompanies an embedding file: the same path
/// with `.txt` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".txt");
    PathBuf::from(s)
}

/// `AVSE`, version, `n`, `d` (u32 LE each), then the row-major f32 data.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Result<Vec<u8>, PersistError> {
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| PersistError::Mismatch(format!("{what} = {v} does not fit the header")))
    };
    let (n, d) = (dim(matrix.n(), "n")?, dim(matrix.d(), "d")?);
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * matrix.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<EmbeddingMatrix, PersistError> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version_at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(format_error(version_at, format!("unsupported version {version}")));
    }
    let n = r.u32("row count")? as usize;
    let d = r.u32("dimension")? as usize;
    let expected = n.checked_mul(d).and_then(|c| c.checked_mul(4));
    if expected != Some(r.remaining()) {
        return Err(format_error(
            r.pos,
            format!("{n} x {d} payload needs {} bytes, found {}", 4 * n * d, r.remaining()),
        ));
    }
    let payload = r.take(r.remaining(), "payload")?;
    Ok(EmbeddingMatrix::new(n, d, f32_values(payload).collect())?)
}

/// Writes the matrix and its sidecar of one sentence per line.
pub fn write_embeddings<S: AsRef<str>>(
    matrix: &EmbeddingMatrix,
    sentences: &[S],
    path: &Path,
) -> Result<(), PersistError> {
    if sentences.len() != matrix.n() {
        return Err(PersistError::Mismatch(format!("{} rows but {} sentences", matrix.n(), sentences.len())));
    }
    let mut text = String::new();
    for s in sentences {
        let s = s.as_ref();
        if s.contains(['\n', '\r']) {
            return Err(PersistError::Mismatch(format!("sentence `{}` spans lines", s.escape_debug())));
        }
        text.push_str(s);
        text.push('\n');
    }
    write_atomic(path, &encode_embeddings(matrix)?)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, Vec<String>), PersistError> {
    let matrix = decode_embeddings(&read_file(path)?)?;
    let side = sidecar_path(path);
    let text = String::from_utf8(read_file(&side)?)
        .map_err(|e| io_error(&side, std::io::Error::new(std::io::ErrorKind::InvalidData, e)))?;
    let sentences: Vec<String> = text.lines().map(str::to_string).collect();
    if sentences.len() != matrix.n() {
        return Err(PersistError::Mismatch(format!(
            "{} has {} lines for {} rows",
            side.display(),
            sentences.len(),
            matrix.n()
        )));
    }
    Ok((matrix, sentences))
}
