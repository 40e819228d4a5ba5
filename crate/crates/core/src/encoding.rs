//! Multibase key strings and the length-prefixed wire framing shared by
//! both envelope formats.

use thiserror::Error;

use crate::identity::KeyKind;

/// Two-byte prefix marking a signing (Ed25519-class) public key.
pub const SIGNING_KEY_PREFIX: [u8; 2] = [0xed, 0x01];
/// Two-byte prefix marking a key-agreement (X25519-class) public key.
pub const AGREEMENT_KEY_PREFIX: [u8; 2] = [0xec, 0x01];

/// Upper bound on a single length-prefixed wire field. Envelopes carry
/// payloads well below this; anything larger is treated as malformed.
const MAX_FIELD_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("invalid multibase key: {0}")]
    InvalidKey(String),
    #[error("truncated wire field")]
    Truncated,
    #[error("wire field of {0} bytes exceeds limit")]
    Oversized(u32),
    #[error("trailing bytes after last wire field")]
    TrailingBytes,
    #[error("invalid base64 field")]
    Base64,
}

/// Encodes a 32-byte public key as `z<base58>` with a kind prefix baked
/// into the encoded bytes.
pub fn encode_public_key(kind: KeyKind, key: &[u8; 32]) -> String {
    let prefix = match kind {
        KeyKind::Signing => SIGNING_KEY_PREFIX,
        KeyKind::KeyAgreement => AGREEMENT_KEY_PREFIX,
    };
    let mut bytes = [0u8; 34];
    bytes[..2].copy_from_slice(&prefix);
    bytes[2..].copy_from_slice(key);
    format!("z{}", bs58::encode(bytes).into_string())
}

pub fn decode_public_key(text: &str) -> Result<(KeyKind, [u8; 32]), EncodingError> {
    let rest = text
        .strip_prefix('z')
        .ok_or_else(|| EncodingError::InvalidKey(format!("missing multibase prefix: {text}")))?;
    let bytes = bs58::decode(rest)
        .into_vec()
        .map_err(|e| EncodingError::InvalidKey(e.to_string()))?;
    if bytes.len() != 34 {
        return Err(EncodingError::InvalidKey(format!(
            "expected 34 bytes, got {}",
            bytes.len()
        )));
    }
    let kind = match [bytes[0], bytes[1]] {
        SIGNING_KEY_PREFIX => KeyKind::Signing,
        AGREEMENT_KEY_PREFIX => KeyKind::KeyAgreement,
        other => {
            return Err(EncodingError::InvalidKey(format!(
                "unknown key prefix {other:02x?}"
            )))
        }
    };
    let mut key = [0u8; 32];
    key.copy_from_slice(&bytes[2..]);
    Ok((kind, key))
}

pub fn b64url(bytes: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(bytes)
}

pub fn b64url_decode(text: &str) -> Result<Vec<u8>, EncodingError> {
    use base64::Engine as _;
    base64::engine::general_purpose::URL_SAFE_NO_PAD
        .decode(text)
        .map_err(|_| EncodingError::Base64)
}

/// Appends one `u32`-big-endian length-prefixed field.
pub fn put_field(buf: &mut Vec<u8>, field: &[u8]) {
    buf.extend_from_slice(&(field.len() as u32).to_be_bytes());
    buf.extend_from_slice(field);
}

/// Cursor over length-prefixed wire fields.
pub struct WireReader<'a> {
    rest: &'a [u8],
}

impl<'a> WireReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        WireReader { rest: bytes }
    }

    pub fn take(&mut self) -> Result<&'a [u8], EncodingError> {
        if self.rest.len() < 4 {
            return Err(EncodingError::Truncated);
        }
        let (len_bytes, rest) = self.rest.split_at(4);
        let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes"));
        if len > MAX_FIELD_LEN {
            return Err(EncodingError::Oversized(len));
        }
        if rest.len() < len as usize {
            return Err(EncodingError::Truncated);
        }
        let (field, rest) = rest.split_at(len as usize);
        self.rest = rest;
        Ok(field)
    }

    pub fn take_array<const N: usize>(&mut self) -> Result<[u8; N], EncodingError> {
        let field = self.take()?;
        field
            .try_into()
            .map_err(|_| EncodingError::InvalidKey(format!("expected {N}-byte field")))
    }

    pub fn finish(self) -> Result<(), EncodingError> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(EncodingError::TrailingBytes)
        }
    }
}
