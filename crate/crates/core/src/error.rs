use std::io;

use thiserror::Error;

use crate::numkernel::KernelError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("training diverged at epoch {epoch}: {term} is not finite")]
    NonFinite { epoch: usize, term: &'static str },
    #[error("teacher failed at position {0}; simulator regression")]
    TeacherFailed(String),
}

/// Problems decoding an on-disk episode or checkpoint.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("file truncated while reading `{field}`")]
    Truncated { field: String },
    #[error("corrupt field `{field}`: {detail}")]
    Corrupt { field: String, detail: String },
    #[error("{0} trailing bytes after last record")]
    TrailingBytes(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
