//! Stateless protocol variant: every message is a headered plaintext
//! (id, type, from, to, created time, body), signed by the sender and
//! then encrypted under a one-pass authenticated key agreement. Both ends
//! resolve DID documents per message; no connection state exists.

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::crypto::{self, NONCE_LEN, TAG_LEN};
use super::{strip_magic, EnvelopeError, MAGIC_V2_ENVELOPE};
use crate::canon::canonical_json;
use crate::encoding::{b64url, b64url_decode, put_field, WireReader};
use crate::identity::{verify, Did, Identity, KeyKind};
use crate::resolver::Resolver;

/// Headered plaintext message. The four addressing headers are always
/// present; `created_time` is carried but not validated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Jwm {
    pub id: String,
    pub message_type: String,
    pub from: Did,
    pub to: Did,
    pub created_time: u64,
    pub body: Vec<u8>,
}

/// Deterministic signature base: length-prefixed header fields in fixed
/// order, with the body carried raw so the base grows byte-for-byte with
/// the payload.
pub fn canonical_jwm_bytes(jwm: &Jwm) -> Vec<u8> {
    let mut out = Vec::with_capacity(jwm.body.len() + 160);
    put_field(&mut out, jwm.id.as_bytes());
    put_field(&mut out, jwm.message_type.as_bytes());
    put_field(&mut out, jwm.from.to_string().as_bytes());
    put_field(&mut out, jwm.to.to_string().as_bytes());
    put_field(&mut out, &jwm.created_time.to_be_bytes());
    put_field(&mut out, &jwm.body);
    out
}

pub fn parse_jwm_bytes(bytes: &[u8]) -> Result<Jwm, EnvelopeError> {
    let mut reader = WireReader::new(bytes);
    let id = string_field(reader.take()?)?;
    let message_type = string_field(reader.take()?)?;
    let from: Did = string_field(reader.take()?)?
        .parse()
        .map_err(|e| EnvelopeError::Malformed(format!("from header: {e}")))?;
    let to: Did = string_field(reader.take()?)?
        .parse()
        .map_err(|e| EnvelopeError::Malformed(format!("to header: {e}")))?;
    let created_time = u64::from_be_bytes(reader.take_array::<8>()?);
    let body = reader.take()?.to_vec();
    reader.finish()?;
    Ok(Jwm {
        id,
        message_type,
        from,
        to,
        created_time,
        body,
    })
}

fn string_field(bytes: &[u8]) -> Result<String, EnvelopeError> {
    String::from_utf8(bytes.to_vec())
        .map_err(|_| EnvelopeError::Malformed("field is not UTF-8".into()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecipientV2 {
    encrypted_key: String,
    kid: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProtectedV2 {
    alg: String,
    enc: String,
    epk: String,
    recipients: Vec<RecipientV2>,
    skid: String,
    typ: String,
}

/// Self-describing envelope: the protected header names the sender and
/// recipient agreement keys and carries the ephemeral share and wrapped
/// content key, so a fresh agent can process it with resolver access
/// alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvelopeV2 {
    pub protected: String,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl EnvelopeV2 {
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = MAGIC_V2_ENVELOPE.to_vec();
        put_field(&mut out, self.protected.as_bytes());
        put_field(&mut out, &self.nonce);
        put_field(&mut out, &self.ciphertext);
        put_field(&mut out, &self.tag);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<EnvelopeV2, EnvelopeError> {
        let rest = strip_magic(bytes, MAGIC_V2_ENVELOPE, "v2 envelope")?;
        let mut reader = WireReader::new(rest);
        let protected = String::from_utf8(reader.take()?.to_vec())
            .map_err(|_| EnvelopeError::Malformed("protected header is not UTF-8".into()))?;
        let nonce = reader.take_array::<NONCE_LEN>()?;
        let ciphertext = reader.take()?.to_vec();
        let tag = reader.take_array::<TAG_LEN>()?;
        reader.finish()?;
        Ok(EnvelopeV2 {
            protected,
            nonce,
            ciphertext,
            tag,
        })
    }

    /// DID the envelope is addressed to, readable without decryption.
    pub fn recipient_did(&self) -> Result<Did, EnvelopeError> {
        let protected = parse_protected(&self.protected)?;
        did_of_kid(&protected.recipients[0].kid)
    }
}

/// Result of packing: the envelope plus facts the caller already paid the
/// resolution cost for (the recipient's endpoint in particular), so a
/// transport does not resolve again.
#[derive(Debug, Clone)]
pub struct PackedV2 {
    pub envelope: EnvelopeV2,
    pub jwm_id: String,
    pub recipient_endpoint: Option<String>,
}

fn did_of_kid(kid: &str) -> Result<Did, EnvelopeError> {
    let (did, _fragment) = kid
        .split_once('#')
        .ok_or_else(|| EnvelopeError::Malformed(format!("kid has no fragment: {kid}")))?;
    did.parse()
        .map_err(|e| EnvelopeError::Malformed(format!("kid DID: {e}")))
}

fn parse_protected(text: &str) -> Result<ProtectedV2, EnvelopeError> {
    let protected: ProtectedV2 = serde_json::from_str(text)
        .map_err(|e| EnvelopeError::Malformed(format!("protected header: {e}")))?;
    if protected.recipients.len() != 1 {
        return Err(EnvelopeError::Malformed(
            "expected exactly one recipient".into(),
        ));
    }
    Ok(protected)
}

/// Encapsulates one message. Resolves the sender's own document (key
/// confirmation) and the recipient's document (agreement key and
/// endpoint): exactly two resolver calls.
pub fn pack_v2<R: RngCore + CryptoRng>(
    sender: &Identity,
    recipient: &Did,
    message_type: &str,
    body: &[u8],
    created_time: u64,
    resolver: &Resolver,
    rng: &mut R,
) -> Result<PackedV2, EnvelopeError> {
    let own_doc = resolver.resolve(&sender.did)?;
    if own_doc.verification_method(&sender.signing.key_id).is_none()
        || own_doc.verification_method(&sender.agreement.key_id).is_none()
    {
        return Err(EnvelopeError::KeyMismatch(format!(
            "own resolved document for {} does not list the wallet keys",
            sender.did
        )));
    }
    let recipient_doc = resolver.resolve(recipient)?;
    let recipient_method = recipient_doc.first_agreement_key().ok_or_else(|| {
        EnvelopeError::KeyMismatch(format!("{recipient} has no agreement key"))
    })?;
    let recipient_key = recipient_method
        .public_key()
        .map_err(|e| EnvelopeError::Malformed(e.to_string()))?;

    let mut id_bytes = [0u8; 16];
    rng.fill_bytes(&mut id_bytes);
    let jwm = Jwm {
        id: uuid::Builder::from_random_bytes(id_bytes).into_uuid().to_string(),
        message_type: message_type.to_owned(),
        from: sender.did.clone(),
        to: recipient.clone(),
        created_time,
        body: body.to_vec(),
    };
    let jwm_bytes = canonical_jwm_bytes(&jwm);
    let signature = sender.sign(&jwm_bytes);

    let mut signed = Vec::with_capacity(jwm_bytes.len() + 128);
    put_field(&mut signed, &jwm_bytes);
    put_field(&mut signed, sender.signing.key_id.as_bytes());
    put_field(&mut signed, &signature);

    // Fresh ephemeral share per message; the KEK binds it together with
    // the static sender key so decryption authenticates the sender.
    let mut eph_secret = [0u8; 32];
    rng.fill_bytes(&mut eph_secret);
    let eph_public =
        x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(eph_secret)).to_bytes();
    let ze = crate::identity::diffie_hellman(&eph_secret, &recipient_key);
    let zs = crate::identity::diffie_hellman(sender.agreement.secret_bytes(), &recipient_key);
    let kek = crypto::one_pass_kek(
        &ze,
        &zs,
        &sender.agreement.key_id,
        &recipient_method.id,
    );

    let mut cek = [0u8; 32];
    rng.fill_bytes(&mut cek);
    // The KEK is unique per message (fresh ephemeral), so a fixed wrap
    // nonce cannot repeat under one key.
    let (mut encrypted_key, ek_tag) = crypto::aead_encrypt(&kek, &[0u8; NONCE_LEN], &[], &cek);
    encrypted_key.extend_from_slice(&ek_tag);

    let protected_json = canonical_json(&ProtectedV2 {
        alg: "ECDH-1PU+XC20PKW".into(),
        enc: "XC20P".into(),
        epk: crate::encoding::encode_public_key(KeyKind::KeyAgreement, &eph_public),
        recipients: vec![RecipientV2 {
            encrypted_key: b64url(&encrypted_key),
            kid: recipient_method.id.clone(),
        }],
        skid: sender.agreement.key_id.clone(),
        typ: "application/didcomm-encrypted+json".into(),
    });
    let protected = String::from_utf8(protected_json).expect("canonical JSON is UTF-8");

    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let (ciphertext, tag) = crypto::aead_encrypt(&cek, &nonce, protected.as_bytes(), &signed);

    Ok(PackedV2 {
        envelope: EnvelopeV2 {
            protected,
            nonce,
            ciphertext,
            tag,
        },
        jwm_id: jwm.id,
        recipient_endpoint: recipient_doc.endpoint_uri().map(str::to_owned),
    })
}

/// Decapsulates one message on a fresh agent: resolves the sender document
/// named by the envelope and the recipient's own document (exactly two
/// resolver calls), decrypts, then verifies the inner signature.
pub fn unpack_v2(
    recipient: &Identity,
    envelope: &EnvelopeV2,
    resolver: &Resolver,
) -> Result<Jwm, EnvelopeError> {
    let protected = parse_protected(&envelope.protected)?;
    let recipient_kid = &protected.recipients[0].kid;
    if did_of_kid(recipient_kid)? != recipient.did {
        return Err(EnvelopeError::Misdelivery(format!(
            "envelope addressed to {recipient_kid}"
        )));
    }
    if *recipient_kid != recipient.agreement.key_id {
        return Err(EnvelopeError::KeyMismatch(format!(
            "no agreement key {recipient_kid} in this wallet"
        )));
    }

    let sender_did = did_of_kid(&protected.skid)?;
    let sender_doc = resolver.resolve(&sender_did)?;
    let own_doc = resolver.resolve(&recipient.did)?;
    if own_doc.verification_method(recipient_kid).is_none() {
        return Err(EnvelopeError::KeyMismatch(format!(
            "own resolved document no longer lists {recipient_kid}"
        )));
    }

    let sender_method = sender_doc.verification_method(&protected.skid).ok_or_else(|| {
        EnvelopeError::Unauthorized(format!(
            "sender document does not list agreement key {}",
            protected.skid
        ))
    })?;
    let sender_key = sender_method
        .public_key()
        .map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
    let (epk_kind, eph_public) = crate::encoding::decode_public_key(&protected.epk)?;
    if epk_kind != KeyKind::KeyAgreement {
        return Err(EnvelopeError::Malformed("epk is not an agreement key".into()));
    }

    let ze = crate::identity::diffie_hellman(recipient.agreement.secret_bytes(), &eph_public);
    let zs = crate::identity::diffie_hellman(recipient.agreement.secret_bytes(), &sender_key);
    let kek = crypto::one_pass_kek(&ze, &zs, &protected.skid, recipient_kid);

    let encrypted_key = b64url_decode(&protected.recipients[0].encrypted_key)
        .map_err(|_| EnvelopeError::Malformed("encrypted_key is not base64url".into()))?;
    if encrypted_key.len() != 32 + TAG_LEN {
        return Err(EnvelopeError::Malformed("encrypted_key has wrong length".into()));
    }
    let (ek_ct, ek_tag_bytes) = encrypted_key.split_at(32);
    let mut ek_tag = [0u8; TAG_LEN];
    ek_tag.copy_from_slice(ek_tag_bytes);
    let cek_bytes = crypto::aead_decrypt(&kek, &[0u8; NONCE_LEN], &[], ek_ct, &ek_tag)
        .map_err(|_| EnvelopeError::Integrity("content key does not unwrap".into()))?;
    let cek: [u8; 32] = cek_bytes
        .try_into()
        .map_err(|_| EnvelopeError::Malformed("unwrapped key has wrong length".into()))?;

    let signed = crypto::aead_decrypt(
        &cek,
        &envelope.nonce,
        envelope.protected.as_bytes(),
        &envelope.ciphertext,
        &envelope.tag,
    )?;

    let mut reader = WireReader::new(&signed);
    let jwm_bytes = reader.take()?.to_vec();
    let signer_kid = string_field(reader.take()?)?;
    let signature = reader.take()?.to_vec();
    reader.finish()?;

    // Sign-then-encrypt: decryption succeeded, now the inner signature
    // must bind the same sender the key agreement authenticated.
    if did_of_kid(&signer_kid)? != sender_did {
        return Err(EnvelopeError::Unauthorized(format!(
            "signer {signer_kid} is not the encrypting sender"
        )));
    }
    let signer_method = sender_doc.verification_method(&signer_kid).ok_or_else(|| {
        EnvelopeError::Unauthorized(format!("sender document does not list {signer_kid}"))
    })?;
    let signer_key = signer_method
        .public_key()
        .map_err(|e| EnvelopeError::Malformed(e.to_string()))?;
    if !verify(&signer_key, &jwm_bytes, &signature) {
        return Err(EnvelopeError::Unauthorized(
            "inner signature does not verify".into(),
        ));
    }

    let jwm = parse_jwm_bytes(&jwm_bytes)?;
    if jwm.from != sender_did {
        return Err(EnvelopeError::Unauthorized(format!(
            "from header {} disagrees with envelope sender {sender_did}",
            jwm.from
        )));
    }
    if jwm.to != recipient.did {
        return Err(EnvelopeError::Misdelivery(format!(
            "message addressed to {}",
            jwm.to
        )));
    }
    Ok(jwm)
}
