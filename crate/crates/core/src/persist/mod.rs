//! Binary checkpoints and embedding files. Everything is written through a
//! temporary file and renamed into place.

mod checkpoint;
mod embeddings;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::encoder::EncoderError;
use crate::tasks::TaskError;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Stage};
pub use embeddings::{
    decode_embeddings, encode_embeddings, read_embeddings, sidecar_path, write_embeddings, EMBEDDING_HEADER_LEN,
};

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

pub(crate) fn format_error(offset: usize, reason: impl Into<String>) -> PersistError {
    PersistError::Format { offset: offset as u64, reason: reason.into() }
}

pub(crate) fn io_error(path: &Path, source: std::io::Error) -> PersistError {
    PersistError::Io { path: path.to_path_buf(), source }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let name =
        path.file_name().ok_or_else(|| PersistError::Mismatch(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(io_error(path, e));
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, PersistError> {
    fs::read(path).map_err(|e| io_error(path, e))
}

/// Little-endian cursor that reports the offset of whatever it fails on.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], PersistError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_error(
                self.pos,
                format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            )),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32, PersistError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), PersistError> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(format_error(
                at,
                format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(expected),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub(crate) fn f32_values(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
}
