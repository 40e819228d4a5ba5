//! DIDs, key pairs, DID documents, and the raw signing primitives every
//! other module builds on.
//!
//! A DID's canonical text form is `did:<method>:<subject>`. The subject is
//! derived from the identity's first signing public key, so a document's
//! binding to its DID can be re-checked by anyone holding the document.

use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer as _, Verifier as _, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canon::canonical_json;
use crate::encoding::{self, EncodingError};

pub const KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DidError {
    #[error("invalid DID syntax: {0}")]
    Syntax(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("document has no {0} key")]
    MissingKey(&'static str),
}

/// Decentralized identifier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Did {
    method: String,
    subject: String,
}

impl Did {
    pub fn new(method: &str, subject: &str) -> Result<Did, DidError> {
        validate_method(method)?;
        validate_subject(subject)?;
        Ok(Did {
            method: method.to_owned(),
            subject: subject.to_owned(),
        })
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "did:{}:{}", self.method, self.subject)
    }
}

impl FromStr for Did {
    type Err = DidError;

    fn from_str(s: &str) -> Result<Did, DidError> {
        parse_did(s)
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Did, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_did(&text).map_err(serde::de::Error::custom)
    }
}

fn validate_method(method: &str) -> Result<(), DidError> {
    if method.is_empty() {
        return Err(DidError::Syntax("empty method".into()));
    }
    if !method
        .chars()
        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
    {
        return Err(DidError::Syntax(format!(
            "method must be lowercase alphanumeric: {method:?}"
        )));
    }
    Ok(())
}

fn validate_subject(subject: &str) -> Result<(), DidError> {
    if subject.is_empty() {
        return Err(DidError::Syntax("empty subject".into()));
    }
    const BASE58: &str = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz";
    if !subject.chars().all(|c| BASE58.contains(c)) {
        return Err(DidError::Syntax(format!(
            "subject contains non-base58 characters: {subject:?}"
        )));
    }
    Ok(())
}

/// Parses the canonical text form. `print(parse(x)) == x` for every valid
/// `x`; anything that is not exactly `did:<method>:<subject>` is rejected.
pub fn parse_did(text: &str) -> Result<Did, DidError> {
    let rest = text
        .strip_prefix("did:")
        .ok_or_else(|| DidError::Syntax(format!("missing did: prefix: {text:?}")))?;
    let mut parts = rest.splitn(3, ':');
    let method = parts.next().unwrap_or_default();
    let subject = parts
        .next()
        .ok_or_else(|| DidError::Syntax(format!("missing subject: {text:?}")))?;
    if parts.next().is_some() {
        return Err(DidError::Syntax(format!(
            "too many colon-separated parts: {text:?}"
        )));
    }
    Did::new(method, subject)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyKind {
    #[serde(rename = "signing")]
    Signing,
    #[serde(rename = "key-agreement")]
    KeyAgreement,
}

/// A key pair held in a wallet. The secret is deliberately excluded from
/// `Debug` output and the type implements neither `Serialize` nor
/// `Deserialize`; secrets leave the process only through explicit
/// accessors.
#[derive(Clone)]
pub struct KeyPair {
    pub kind: KeyKind,
    pub public: [u8; KEY_LEN],
    secret: [u8; KEY_LEN],
    pub key_id: String,
}

impl KeyPair {
    pub fn from_secret(kind: KeyKind, secret: [u8; KEY_LEN], key_id: String) -> KeyPair {
        let public = match kind {
            KeyKind::Signing => SigningKey::from_bytes(&secret).verifying_key().to_bytes(),
            KeyKind::KeyAgreement => {
                x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(secret)).to_bytes()
            }
        };
        KeyPair {
            kind,
            public,
            secret,
            key_id,
        }
    }

    pub fn secret_bytes(&self) -> &[u8; KEY_LEN] {
        &self.secret
    }

    pub fn public_multibase(&self) -> String {
        encoding::encode_public_key(self.kind, &self.public)
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("kind", &self.kind)
            .field("key_id", &self.key_id)
            .field("public", &self.public_multibase())
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationMethod {
    pub id: String,
    pub kind: KeyKind,
    pub public_key_multibase: String,
}

impl VerificationMethod {
    pub fn public_key(&self) -> Result<[u8; KEY_LEN], DidError> {
        let (kind, key) = encoding::decode_public_key(&self.public_key_multibase)?;
        if kind != self.kind {
            return Err(DidError::Syntax(format!(
                "key prefix disagrees with declared kind for {}",
                self.id
            )));
        }
        Ok(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEndpoint {
    pub id: String,
    pub endpoint_type: String,
    pub uri: String,
}

/// Public record resolvable from a DID. Carries no secret material; the
/// `version` field is assigned by the registry and excluded from the
/// canonical signature base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DidDocument {
    pub id: Did,
    pub verification_methods: Vec<VerificationMethod>,
    pub service_endpoints: Vec<ServiceEndpoint>,
    #[serde(default)]
    pub version: u64,
}

#[derive(Serialize)]
struct CanonicalDocument<'a> {
    id: &'a Did,
    verification_methods: &'a [VerificationMethod],
    service_endpoints: &'a [ServiceEndpoint],
}

impl DidDocument {
    /// Signature base for registry proofs: the document without its
    /// registry-assigned version, canonically serialized.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&CanonicalDocument {
            id: &self.id,
            verification_methods: &self.verification_methods,
            service_endpoints: &self.service_endpoints,
        })
    }

    pub fn first_signing_key(&self) -> Option<&VerificationMethod> {
        self.verification_methods
            .iter()
            .find(|m| m.kind == KeyKind::Signing)
    }

    pub fn first_agreement_key(&self) -> Option<&VerificationMethod> {
        self.verification_methods
            .iter()
            .find(|m| m.kind == KeyKind::KeyAgreement)
    }

    pub fn verification_method(&self, key_id: &str) -> Option<&VerificationMethod> {
        self.verification_methods.iter().find(|m| m.id == key_id)
    }

    pub fn endpoint_uri(&self) -> Option<&str> {
        self.service_endpoints.first().map(|s| s.uri.as_str())
    }

    /// Checks structural invariants: at least one key of each kind and a
    /// subject that re-derives from the first signing key.
    pub fn validate(&self) -> Result<(), DidError> {
        let signing = self
            .first_signing_key()
            .ok_or(DidError::MissingKey("signing"))?;
        self.first_agreement_key()
            .ok_or(DidError::MissingKey("key-agreement"))?;
        let expected = subject_for_signing_key(&signing.public_key()?);
        if self.id.subject() != expected {
            return Err(DidError::Syntax(format!(
                "subject {} does not derive from the first signing key",
                self.id
            )));
        }
        Ok(())
    }
}

/// An identity as held by its owner: the DID, its public document, and
/// the two secret key pairs.
#[derive(Debug, Clone)]
pub struct Identity {
    pub did: Did,
    pub document: DidDocument,
    pub signing: KeyPair,
    pub agreement: KeyPair,
}

impl Identity {
    pub fn sign(&self, message: &[u8]) -> [u8; SIGNATURE_LEN] {
        sign(self.signing.secret_bytes(), message)
    }

    /// Self-signature over the document's canonical bytes, accepted by the
    /// registry as the registration proof.
    pub fn document_proof(&self) -> [u8; SIGNATURE_LEN] {
        self.sign(&self.document.canonical_bytes())
    }

    pub fn key_pairs(&self) -> Vec<&KeyPair> {
        vec![&self.signing, &self.agreement]
    }
}

/// Derives the DID subject from a signing public key: multibase base58 of
/// the 16-byte truncated SHA-256 of the key.
pub fn subject_for_signing_key(public: &[u8; KEY_LEN]) -> String {
    let digest = Sha256::digest(public);
    format!("z{}", bs58::encode(&digest[..16]).into_string())
}

/// Creates a fresh identity: one signing key, one key-agreement key, one
/// service endpoint. Secrets are returned only to the caller; the document
/// contains public material exclusively.
pub fn generate_identity<R: RngCore + CryptoRng>(
    method: &str,
    endpoint_uri: &str,
    rng: &mut R,
) -> Result<Identity, DidError> {
    validate_method(method)?;

    let mut signing_seed = [0u8; KEY_LEN];
    rng.fill_bytes(&mut signing_seed);
    let mut agreement_seed = [0u8; KEY_LEN];
    rng.fill_bytes(&mut agreement_seed);

    let signing_public = SigningKey::from_bytes(&signing_seed).verifying_key().to_bytes();
    let did = Did::new(method, &subject_for_signing_key(&signing_public))?;

    let signing = KeyPair::from_secret(KeyKind::Signing, signing_seed, format!("{did}#key-1"));
    let agreement =
        KeyPair::from_secret(KeyKind::KeyAgreement, agreement_seed, format!("{did}#key-2"));

    let document = DidDocument {
        id: did.clone(),
        verification_methods: vec![
            VerificationMethod {
                id: signing.key_id.clone(),
                kind: KeyKind::Signing,
                public_key_multibase: signing.public_multibase(),
            },
            VerificationMethod {
                id: agreement.key_id.clone(),
                kind: KeyKind::KeyAgreement,
                public_key_multibase: agreement.public_multibase(),
            },
        ],
        service_endpoints: vec![ServiceEndpoint {
            id: format!("{did}#didcomm"),
            endpoint_type: "DIDCommMessaging".into(),
            uri: endpoint_uri.to_owned(),
        }],
        version: 0,
    };

    Ok(Identity {
        did,
        document,
        signing,
        agreement,
    })
}

/// Convenience form using the operating system RNG.
pub fn generate(method: &str, endpoint_uri: &str) -> Result<Identity, DidError> {
    generate_identity(method, endpoint_uri, &mut rand::rngs::OsRng)
}

/// Ed25519 signature; deterministic for a fixed `(secret, message)` pair.
pub fn sign(secret: &[u8; KEY_LEN], message: &[u8]) -> [u8; SIGNATURE_LEN] {
    SigningKey::from_bytes(secret).sign(message).to_bytes()
}

/// Signature check. Malformed keys or signatures of the wrong length
/// verify as `false` rather than raising an error.
pub fn verify(public: &[u8; KEY_LEN], message: &[u8], signature: &[u8]) -> bool {
    let Ok(vk) = VerifyingKey::from_bytes(public) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return false;
    };
    vk.verify(message, &sig).is_ok()
}

/// X25519 Diffie-Hellman between an agreement secret and a peer's
/// agreement public key.
pub fn diffie_hellman(secret: &[u8; KEY_LEN], public: &[u8; KEY_LEN]) -> [u8; KEY_LEN] {
    x25519_dalek::StaticSecret::from(*secret)
        .diffie_hellman(&x25519_dalek::PublicKey::from(*public))
        .to_bytes()
}
