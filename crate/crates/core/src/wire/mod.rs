//! Parameter serialization and the three exchange transports.
//!
//! * in-process: [`crate::federation::SimExchange`]
//! * shared directory: [`dir`]
//! * framed TCP: [`net`]

mod codec;
pub mod dataset;
pub mod dir;
mod message;
pub mod net;

use std::path::PathBuf;

use thiserror::Error;

pub use codec::{
    blob_len, decode_params, decode_params_with_dtype, encode_params, quantize, Dtype, EMPTY_BLOB_LEN, PARAM_MAGIC,
    PARAM_VERSION,
};
pub use message::{
    decode_frame, encode_frame, read_message, write_message, ErrorCode, Message, MessageKind, FRAME_MAGIC,
    FRAME_VERSION, HEADER_LEN, MAX_PAYLOAD,
};

#[derive(Debug, Error)]
pub enum WireError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("frame payload of {0} bytes exceeds limit")]
    FrameTooLarge(u64),
    #[error("entry name of {0} bytes exceeds 65535")]
    NameTooLong(usize),
    #[error("cannot encode: {0}")]
    Encoding(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<WireError>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl WireError {
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        WireError::File {
            path: path.into(),
            source: Box::new(self),
        }
    }
}
