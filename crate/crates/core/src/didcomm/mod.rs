//! The two envelope protocols.
//!
//! `v1` establishes a pairwise connection first and then sends compact
//! headerless envelopes against cached peer documents. `v2` is stateless:
//! every message is a headered, signed, then encrypted entity that any
//! holder of the recipient key can process with resolver access alone.
//!
//! On the wire each artifact starts with a four-byte magic so an agent can
//! reject material from the other protocol variant with a format error.

pub mod crypto;
pub mod v1;
pub mod v2;

use thiserror::Error;

use crate::encoding::EncodingError;
use crate::resolver::ResolveError;

/// Wire magics. Four bytes each: three identifying the artifact family
/// and one version byte.
pub const MAGIC_V1_ENVELOPE: &[u8; 4] = b"DC1\0";
pub const MAGIC_V1_EXCHANGE: &[u8; 4] = b"DX1\0";
pub const MAGIC_V2_ENVELOPE: &[u8; 4] = b"DC2\0";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvelopeError {
    /// Ciphertext or tag does not authenticate.
    #[error("integrity failure: {0}")]
    Integrity(String),
    /// Cryptographic sender or recipient checks failed.
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    /// Envelope addressed to a different DID.
    #[error("misdelivery: {0}")]
    Misdelivery(String),
    /// Bytes do not parse as the expected artifact.
    #[error("malformed envelope: {0}")]
    Malformed(String),
    /// Operation not legal in the current connection state.
    #[error("protocol state error: {0}")]
    ProtocolState(String),
    /// A required key is absent from a resolved document.
    #[error("key mismatch: {0}")]
    KeyMismatch(String),
    #[error(transparent)]
    Resolution(#[from] ResolveError),
}

impl From<EncodingError> for EnvelopeError {
    fn from(e: EncodingError) -> EnvelopeError {
        EnvelopeError::Malformed(e.to_string())
    }
}

pub(crate) fn strip_magic<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    what: &str,
) -> Result<&'a [u8], EnvelopeError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(EnvelopeError::Malformed(format!(
            "bytes do not start with the {what} magic"
        )));
    }
    Ok(&bytes[4..])
}
