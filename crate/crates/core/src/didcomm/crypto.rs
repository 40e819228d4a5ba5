//! AEAD, key derivation, and box constructions shared by both envelope
//! formats. One cipher (XChaCha20-Poly1305) is used everywhere so that
//! byte and latency differences between the protocol variants reflect
//! protocol structure rather than cipher choice.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use hkdf::Hkdf;
use sha2::{Digest, Sha256};

use super::EnvelopeError;
use crate::identity::diffie_hellman;

pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;
pub const KEY_LEN: usize = 32;

/// Encrypts and splits the Poly1305 tag off the ciphertext.
pub fn aead_encrypt(
    key: &[u8; KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> (Vec<u8>, [u8; TAG_LEN]) {
    let cipher = XChaCha20Poly1305::new(key.into());
    let mut combined = cipher
        .encrypt(XNonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("XChaCha20-Poly1305 encryption is infallible for in-memory buffers");
    let tag_start = combined.len() - TAG_LEN;
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(&combined[tag_start..]);
    combined.truncate(tag_start);
    (combined, tag)
}

pub fn aead_decrypt(
    key: &[u8; KEY_LEN],
    nonce: &[u8; NONCE_LEN],
    aad: &[u8],
    ciphertext: &[u8],
    tag: &[u8; TAG_LEN],
) -> Result<Vec<u8>, EnvelopeError> {
    let cipher = XChaCha20Poly1305::new(key.into());
    let mut combined = Vec::with_capacity(ciphertext.len() + TAG_LEN);
    combined.extend_from_slice(ciphertext);
    combined.extend_from_slice(tag);
    cipher
        .decrypt(XNonce::from_slice(nonce), Payload { msg: &combined, aad })
        .map_err(|_| EnvelopeError::Integrity("authentication tag mismatch".into()))
}

/// HKDF-SHA256 over shared secret material, bound to a context string.
pub fn derive_key(ikm: &[u8], info: &[u8]) -> [u8; KEY_LEN] {
    let hk = Hkdf::<Sha256>::new(None, ikm);
    let mut key = [0u8; KEY_LEN];
    hk.expand(info, &mut key)
        .expect("32-byte output fits HKDF-SHA256 bounds");
    key
}

/// Static-static box key between two agreement keys.
pub fn box_key(
    my_secret: &[u8; KEY_LEN],
    their_public: &[u8; KEY_LEN],
    info: &[u8],
) -> [u8; KEY_LEN] {
    derive_key(&diffie_hellman(my_secret, their_public), info)
}

/// One-pass authenticated key agreement: the KEK binds both an ephemeral
/// share and the sender's static agreement key, so decrypting with it
/// authenticates the sender.
pub fn one_pass_kek(
    ephemeral_shared: &[u8; KEY_LEN],
    static_shared: &[u8; KEY_LEN],
    sender_kid: &str,
    recipient_kid: &str,
) -> [u8; KEY_LEN] {
    let mut ikm = Vec::with_capacity(2 * KEY_LEN);
    ikm.extend_from_slice(ephemeral_shared);
    ikm.extend_from_slice(static_shared);
    let mut info = Vec::new();
    info.extend_from_slice(b"didcomm-v2-1pu");
    crate::encoding::put_field(&mut info, sender_kid.as_bytes());
    crate::encoding::put_field(&mut info, recipient_kid.as_bytes());
    derive_key(&ikm, &info)
}

/// Deterministic nonce for sealed boxes, derived from the two public keys
/// involved. Safe because each sealed box uses a fresh ephemeral key.
pub fn sealed_box_nonce(
    ephemeral_public: &[u8; KEY_LEN],
    recipient_public: &[u8; KEY_LEN],
) -> [u8; NONCE_LEN] {
    let mut hasher = Sha256::new();
    hasher.update(ephemeral_public);
    hasher.update(recipient_public);
    let digest = hasher.finalize();
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&digest[..NONCE_LEN]);
    nonce
}

/// Encrypts `plaintext` to a recipient's agreement key under a fresh
/// ephemeral key: `ephemeral_public || ciphertext || tag`.
pub fn seal_to(
    recipient_public: &[u8; KEY_LEN],
    plaintext: &[u8],
    rng: &mut (impl rand::RngCore + rand::CryptoRng),
) -> Vec<u8> {
    let mut eph_secret = [0u8; KEY_LEN];
    rng.fill_bytes(&mut eph_secret);
    let eph_public = x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(eph_secret))
        .to_bytes();
    let key = box_key(&eph_secret, recipient_public, b"didcomm-sealed-box");
    let nonce = sealed_box_nonce(&eph_public, recipient_public);
    let (ciphertext, tag) = aead_encrypt(&key, &nonce, &[], plaintext);
    let mut out = Vec::with_capacity(KEY_LEN + ciphertext.len() + TAG_LEN);
    out.extend_from_slice(&eph_public);
    out.extend_from_slice(&ciphertext);
    out.extend_from_slice(&tag);
    out
}

pub fn open_sealed(
    recipient_secret: &[u8; KEY_LEN],
    recipient_public: &[u8; KEY_LEN],
    sealed: &[u8],
) -> Result<Vec<u8>, EnvelopeError> {
    if sealed.len() < KEY_LEN + TAG_LEN {
        return Err(EnvelopeError::Malformed("sealed box too short".into()));
    }
    let mut eph_public = [0u8; KEY_LEN];
    eph_public.copy_from_slice(&sealed[..KEY_LEN]);
    let (ciphertext, tag_bytes) = sealed[KEY_LEN..].split_at(sealed.len() - KEY_LEN - TAG_LEN);
    let mut tag = [0u8; TAG_LEN];
    tag.copy_from_slice(tag_bytes);
    let key = box_key(recipient_secret, &eph_public, b"didcomm-sealed-box");
    let nonce = sealed_box_nonce(&eph_public, recipient_public);
    aead_decrypt(&key, &nonce, &[], ciphertext, &tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn aead_round_trip_and_tamper() {
        let key = [1u8; KEY_LEN];
        let nonce = [2u8; NONCE_LEN];
        let (ct, tag) = aead_encrypt(&key, &nonce, b"aad", b"payload");
        assert_eq!(ct.len(), 7);
        assert_eq!(
            aead_decrypt(&key, &nonce, b"aad", &ct, &tag).unwrap(),
            b"payload"
        );
        assert!(aead_decrypt(&key, &nonce, b"aaX", &ct, &tag).is_err());
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert!(aead_decrypt(&key, &nonce, b"aad", &bad, &tag).is_err());
    }

    #[test]
    fn empty_plaintext_encrypts_to_tag_only() {
        let key = [3u8; KEY_LEN];
        let nonce = [4u8; NONCE_LEN];
        let (ct, tag) = aead_encrypt(&key, &nonce, &[], &[]);
        assert!(ct.is_empty());
        assert_eq!(aead_decrypt(&key, &nonce, &[], &ct, &tag).unwrap(), b"");
    }

    #[test]
    fn sealed_box_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(51);
        let mut secret = [0u8; KEY_LEN];
        rand::RngCore::fill_bytes(&mut rng, &mut secret);
        let public =
            x25519_dalek::PublicKey::from(&x25519_dalek::StaticSecret::from(secret)).to_bytes();

        let sealed = seal_to(&public, b"hint", &mut rng);
        assert_eq!(open_sealed(&secret, &public, &sealed).unwrap(), b"hint");

        let mut wrong = [0u8; KEY_LEN];
        rand::RngCore::fill_bytes(&mut rng, &mut wrong);
        assert!(open_sealed(&wrong, &public, &sealed).is_err());
    }

    #[test]
    fn one_pass_kek_binds_kids() {
        let e = [5u8; KEY_LEN];
        let s = [6u8; KEY_LEN];
        let a = one_pass_kek(&e, &s, "did:sba:a#key-2", "did:sba:b#key-2");
        let b = one_pass_kek(&e, &s, "did:sba:a#key-2", "did:sba:c#key-2");
        assert_ne!(a, b);
    }
}
