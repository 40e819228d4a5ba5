//! Verifiable credentials and presentations: issuer-signed claim
//! containers standing in for OAuth2 access tokens, plus the
//! challenge-response presentation flow a verifier runs before granting a
//! service request.
//!
//! Everything signed here is signed over canonical bytes, so the formats
//! are byte-stable across processes and suitable for on-wire accounting.

use std::collections::BTreeMap;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::canonical_json;
use crate::identity::{verify, Did, Identity};
use crate::resolver::Resolver;
use crate::vdr::{SchemaRecord, Vdr, VdrError};

pub const NONCE_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CredentialError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("holder is not the credential subject")]
    HolderMismatch,
}

impl From<VdrError> for CredentialError {
    fn from(e: VdrError) -> CredentialError {
        match e {
            VdrError::NotFound(w) => CredentialError::NotFound(w),
            VdrError::AlreadyExists(w) => CredentialError::AlreadyExists(w),
            other => CredentialError::Validation(other.to_string()),
        }
    }
}

/// Issuer-signed claims about a subject DID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiableCredential {
    pub credential_id: String,
    pub schema_id: String,
    pub issuer: Did,
    pub subject: Did,
    pub claims: BTreeMap<String, String>,
    pub registry_id: String,
    pub issuance_time: u64,
    /// Signature over [`VerifiableCredential::canonical_bytes`] by the
    /// issuer's signing key.
    pub issuer_signature: String,
}

#[derive(Serialize)]
struct CanonicalCredential<'a> {
    credential_id: &'a str,
    schema_id: &'a str,
    issuer: &'a Did,
    subject: &'a Did,
    claims: &'a BTreeMap<String, String>,
    registry_id: &'a str,
    issuance_time: u64,
}

impl VerifiableCredential {
    /// Signature base: every field except the signature itself.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_json(&CanonicalCredential {
            credential_id: &self.credential_id,
            schema_id: &self.schema_id,
            issuer: &self.issuer,
            subject: &self.subject,
            claims: &self.claims,
            registry_id: &self.registry_id,
            issuance_time: self.issuance_time,
        })
    }
}

/// Holder-signed wrapper binding a credential to a verifier-supplied
/// nonce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiablePresentation {
    pub credential: VerifiableCredential,
    pub holder: Did,
    pub nonce: [u8; NONCE_LEN],
    /// Signature over credential canonical bytes followed by the nonce.
    pub holder_signature: String,
}

impl VerifiablePresentation {
    pub fn signing_base(credential: &VerifiableCredential, nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
        let mut base = credential.canonical_bytes();
        base.extend_from_slice(nonce);
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Granted,
    Denied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenialReason {
    Ok,
    BadIssuerSignature,
    BadHolderSignature,
    Revoked,
    SchemaMismatch,
    NonceMismatch,
    HolderMismatch,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub verdict: Verdict,
    pub reason: DenialReason,
}

impl VerificationOutcome {
    pub fn granted() -> VerificationOutcome {
        VerificationOutcome {
            verdict: Verdict::Granted,
            reason: DenialReason::Ok,
        }
    }

    pub fn denied(reason: DenialReason) -> VerificationOutcome {
        debug_assert!(reason != DenialReason::Ok);
        VerificationOutcome {
            verdict: Verdict::Denied,
            reason,
        }
    }

    pub fn is_granted(&self) -> bool {
        self.verdict == Verdict::Granted
    }
}

/// Stores an issuer-owned schema in the registry.
pub fn define_schema(
    issuer: &Identity,
    vdr: &Vdr,
    schema_id: &str,
    attribute_names: &[&str],
) -> Result<SchemaRecord, CredentialError> {
    if !vdr.contains(&issuer.did) {
        return Err(CredentialError::NotFound(issuer.did.to_string()));
    }
    let record = SchemaRecord {
        schema_id: schema_id.to_owned(),
        attribute_names: attribute_names.iter().map(|s| (*s).to_owned()).collect(),
        issuer: issuer.did.clone(),
    };
    record
        .validate()
        .map_err(|e| CredentialError::Validation(e.to_string()))?;
    vdr.put_schema(record.clone())?;
    Ok(record)
}

/// Issues a credential under an existing schema. Claims must carry exactly
/// the schema's attributes; the credential is born unrevoked in the given
/// registry.
pub fn issue<R: RngCore + CryptoRng>(
    issuer: &Identity,
    vdr: &Vdr,
    schema_id: &str,
    subject: &Did,
    claims: BTreeMap<String, String>,
    registry_id: &str,
    issuance_time: u64,
    rng: &mut R,
) -> Result<VerifiableCredential, CredentialError> {
    let schema = vdr.get_schema(schema_id)?;
    let expected: Vec<&String> = schema.attribute_names.iter().collect();
    let got: Vec<&String> = claims.keys().collect();
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    if got != expected_sorted {
        return Err(CredentialError::Validation(format!(
            "claims {got:?} do not match schema attributes {expected:?}"
        )));
    }
    if !vdr.contains(subject) {
        return Err(CredentialError::NotFound(subject.to_string()));
    }
    // The registry must exist; a fresh credential is unrevoked by absence.
    vdr.is_revoked(registry_id, "")?;

    let mut id_bytes = [0u8; 16];
    rng.fill_bytes(&mut id_bytes);
    let credential_id = uuid::Builder::from_random_bytes(id_bytes)
        .into_uuid()
        .to_string();

    let mut credential = VerifiableCredential {
        credential_id,
        schema_id: schema_id.to_owned(),
        issuer: issuer.did.clone(),
        subject: subject.clone(),
        claims,
        registry_id: registry_id.to_owned(),
        issuance_time,
        issuer_signature: String::new(),
    };
    let signature = issuer.sign(&credential.canonical_bytes());
    credential.issuer_signature = crate::encoding::b64url(&signature);
    Ok(credential)
}

/// Wraps a credential into a nonce-bound presentation. Only the subject
/// can present.
pub fn present(
    holder: &Identity,
    credential: &VerifiableCredential,
    nonce: [u8; NONCE_LEN],
) -> Result<VerifiablePresentation, CredentialError> {
    if holder.did != credential.subject {
        return Err(CredentialError::HolderMismatch);
    }
    let base = VerifiablePresentation::signing_base(credential, &nonce);
    let signature = holder.sign(&base);
    Ok(VerifiablePresentation {
        credential: credential.clone(),
        holder: holder.did.clone(),
        nonce,
        holder_signature: crate::encoding::b64url(&signature),
    })
}

/// Full presentation check: resolves the issuer's and holder's documents
/// (exactly two resolver calls), verifies both signatures, schema
/// conformance, revocation status, and the expiry claim when the schema
/// defines one. Failures map to denial reasons, never to errors.
pub fn verify_presentation(
    vp: &VerifiablePresentation,
    expected_nonce: &[u8; NONCE_LEN],
    now: u64,
    resolver: &Resolver,
    vdr: &Vdr,
) -> VerificationOutcome {
    // Both documents are always resolved, keeping the resolver-count
    // contract independent of the failure path taken below.
    let issuer_doc = resolver.resolve(&vp.credential.issuer);
    let holder_doc = resolver.resolve(&vp.holder);

    if vp.holder != vp.credential.subject {
        return VerificationOutcome::denied(DenialReason::HolderMismatch);
    }
    if vp.nonce != *expected_nonce {
        return VerificationOutcome::denied(DenialReason::NonceMismatch);
    }

    let issuer_key = issuer_doc
        .ok()
        .and_then(|doc| doc.first_signing_key().and_then(|m| m.public_key().ok()));
    let Some(issuer_key) = issuer_key else {
        return VerificationOutcome::denied(DenialReason::BadIssuerSignature);
    };
    let issuer_sig = crate::encoding::b64url_decode(&vp.credential.issuer_signature);
    let issuer_ok = issuer_sig
        .map(|sig| verify(&issuer_key, &vp.credential.canonical_bytes(), &sig))
        .unwrap_or(false);
    if !issuer_ok {
        return VerificationOutcome::denied(DenialReason::BadIssuerSignature);
    }

    let holder_key = holder_doc
        .ok()
        .and_then(|doc| doc.first_signing_key().and_then(|m| m.public_key().ok()));
    let Some(holder_key) = holder_key else {
        return VerificationOutcome::denied(DenialReason::BadHolderSignature);
    };
    let base = VerifiablePresentation::signing_base(&vp.credential, &vp.nonce);
    let holder_ok = crate::encoding::b64url_decode(&vp.holder_signature)
        .map(|sig| verify(&holder_key, &base, &sig))
        .unwrap_or(false);
    if !holder_ok {
        return VerificationOutcome::denied(DenialReason::BadHolderSignature);
    }

    let Ok(schema) = vdr.get_schema(&vp.credential.schema_id) else {
        return VerificationOutcome::denied(DenialReason::SchemaMismatch);
    };
    let mut expected_attrs: Vec<&String> = schema.attribute_names.iter().collect();
    expected_attrs.sort();
    let got_attrs: Vec<&String> = vp.credential.claims.keys().collect();
    if got_attrs != expected_attrs {
        return VerificationOutcome::denied(DenialReason::SchemaMismatch);
    }

    match vdr.is_revoked(&vp.credential.registry_id, &vp.credential.credential_id) {
        Ok(false) => {}
        // Unknown registries deny rather than grant by default.
        Ok(true) | Err(_) => return VerificationOutcome::denied(DenialReason::Revoked),
    }

    if schema.attribute_names.iter().any(|a| a == "expiry") {
        let expiry = vp
            .credential
            .claims
            .get("expiry")
            .and_then(|v| v.parse::<u64>().ok());
        match expiry {
            Some(expiry) if now <= expiry => {}
            Some(_) => return VerificationOutcome::denied(DenialReason::Expired),
            None => return VerificationOutcome::denied(DenialReason::SchemaMismatch),
        }
    }

    VerificationOutcome::granted()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolver::CachePolicy;
    use crate::vdr::revocation_proof_bytes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    struct Fixture {
        vdr: Arc<Vdr>,
        resolver: Resolver,
        nrf: Identity,
        amf: Identity,
        smf: Identity,
        rng: ChaCha20Rng,
    }

    const SCHEMA: &str = "nf-authorization-v1";
    const REGISTRY: &str = "nf-authorization-rev-1";
    const NOW: u64 = 1_700_000_000;

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let vdr = Arc::new(Vdr::default());
        let mut make = |uri: &str| {
            let id = crate::identity::generate_identity("sba", uri, &mut rng).unwrap();
            vdr.register(&id.document, &id.document_proof()).unwrap();
            id
        };
        let nrf = make("http://localhost:7001/didcomm");
        let amf = make("http://localhost:7002/didcomm");
        let smf = make("http://localhost:7003/didcomm");
        define_schema(&nrf, &vdr, SCHEMA, &["nf_type", "allowed_service", "expiry"]).unwrap();
        vdr.create_registry(REGISTRY, &nrf.did).unwrap();
        let resolver = Resolver::new(vdr.clone(), CachePolicy::None);
        Fixture {
            vdr,
            resolver,
            nrf,
            amf,
            smf,
            rng,
        }
    }

    fn claims() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("nf_type".to_owned(), "AMF".to_owned()),
            ("allowed_service".to_owned(), "nsmf-pdusession".to_owned()),
            ("expiry".to_owned(), (NOW + 3600).to_string()),
        ])
    }

    fn issue_default(f: &mut Fixture) -> VerifiableCredential {
        issue(
            &f.nrf,
            &f.vdr,
            SCHEMA,
            &f.amf.did,
            claims(),
            REGISTRY,
            NOW,
            &mut f.rng,
        )
        .unwrap()
    }

    #[test]
    fn schema_lifecycle() {
        let f = fixture(31);
        assert_eq!(
            f.vdr.get_schema(SCHEMA).unwrap().attribute_names,
            vec!["nf_type", "allowed_service", "expiry"]
        );
        assert!(matches!(
            define_schema(&f.nrf, &f.vdr, SCHEMA, &["a"]),
            Err(CredentialError::AlreadyExists(_))
        ));
        assert!(matches!(
            define_schema(&f.nrf, &f.vdr, "empty", &[]),
            Err(CredentialError::Validation(_))
        ));
    }

    #[test]
    fn issue_and_verify_happy_path() {
        let mut f = fixture(32);
        let vc = issue_default(&mut f);
        assert_eq!(vc.issuer, f.nrf.did);
        assert_eq!(vc.subject, f.amf.did);

        let nonce = [9u8; NONCE_LEN];
        let vp = present(&f.amf, &vc, nonce).unwrap();
        let outcome = verify_presentation(&vp, &nonce, NOW, &f.resolver, &f.vdr);
        assert!(outcome.is_granted());
        assert_eq!(outcome.reason, DenialReason::Ok);
    }

    #[test]
    fn issue_rejects_claim_mismatch() {
        let mut f = fixture(33);
        let mut missing = claims();
        missing.remove("expiry");
        assert!(matches!(
            issue(&f.nrf, &f.vdr, SCHEMA, &f.amf.did, missing, REGISTRY, NOW, &mut f.rng),
            Err(CredentialError::Validation(_))
        ));
        assert!(matches!(
            issue(&f.nrf, &f.vdr, "missing", &f.amf.did, claims(), REGISTRY, NOW, &mut f.rng),
            Err(CredentialError::NotFound(_))
        ));
    }

    #[test]
    fn tampered_claim_fails_issuer_signature() {
        let mut f = fixture(34);
        let mut vc = issue_default(&mut f);
        vc.claims
            .insert("nf_type".to_owned(), "SMF".to_owned());
        let nonce = [1u8; NONCE_LEN];
        let vp = present(&f.amf, &vc, nonce).unwrap();
        let outcome = verify_presentation(&vp, &nonce, NOW, &f.resolver, &f.vdr);
        assert_eq!(outcome.reason, DenialReason::BadIssuerSignature);
    }

    #[test]
    fn non_subject_cannot_present() {
        let mut f = fixture(35);
        let vc = issue_default(&mut f);
        assert!(matches!(
            present(&f.smf, &vc, [0u8; NONCE_LEN]),
            Err(CredentialError::HolderMismatch)
        ));
    }

    #[test]
    fn nonce_binds_presentation() {
        let mut f = fixture(36);
        let vc = issue_default(&mut f);
        let vp1 = present(&f.amf, &vc, [1u8; NONCE_LEN]).unwrap();
        let vp2 = present(&f.amf, &vc, [2u8; NONCE_LEN]).unwrap();
        assert_ne!(vp1.holder_signature, vp2.holder_signature);

        // Replay under a different expected nonce is denied.
        let outcome = verify_presentation(&vp1, &[2u8; NONCE_LEN], NOW, &f.resolver, &f.vdr);
        assert_eq!(outcome.reason, DenialReason::NonceMismatch);
    }

    #[test]
    fn revoked_credential_is_denied() {
        let mut f = fixture(37);
        let vc = issue_default(&mut f);
        let proof = f
            .nrf
            .sign(&revocation_proof_bytes(REGISTRY, &vc.credential_id));
        f.vdr.revoke(REGISTRY, &vc.credential_id, &proof).unwrap();

        let nonce = [3u8; NONCE_LEN];
        let vp = present(&f.amf, &vc, nonce).unwrap();
        let outcome = verify_presentation(&vp, &nonce, NOW, &f.resolver, &f.vdr);
        assert_eq!(outcome.verdict, Verdict::Denied);
        assert_eq!(outcome.reason, DenialReason::Revoked);
    }

    #[test]
    fn expired_credential_is_denied() {
        let mut f = fixture(38);
        let vc = issue_default(&mut f);
        let nonce = [4u8; NONCE_LEN];
        let vp = present(&f.amf, &vc, nonce).unwrap();
        let later = NOW + 7200;
        let outcome = verify_presentation(&vp, &nonce, later, &f.resolver, &f.vdr);
        assert_eq!(outcome.reason, DenialReason::Expired);
    }

    #[test]
    fn verification_performs_exactly_two_resolves() {
        let mut f = fixture(39);
        let vc = issue_default(&mut f);
        let nonce = [5u8; NONCE_LEN];
        let vp = present(&f.amf, &vc, nonce).unwrap();

        f.resolver.reset_metrics();
        verify_presentation(&vp, &nonce, NOW, &f.resolver, &f.vdr);
        assert_eq!(f.resolver.snapshot_metrics().ledger_reads, 2);

        // Denied paths also resolve exactly twice.
        f.resolver.reset_metrics();
        verify_presentation(&vp, &[0u8; NONCE_LEN], NOW, &f.resolver, &f.vdr);
        assert_eq!(f.resolver.snapshot_metrics().ledger_reads, 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // API-level unforgeability: mutating any field of a valid
        // presentation makes verification deny.
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn mutated_presentations_are_denied(which in 0u8..6, tweak in 1u8..255) {
                let mut f = fixture(40);
                let vc = issue_default(&mut f);
                let nonce = [6u8; NONCE_LEN];
                let mut vp = present(&f.amf, &vc, nonce).unwrap();

                match which {
                    0 => { vp.credential.claims.insert("nf_type".into(), format!("X{tweak}")); }
                    1 => { vp.credential.schema_id = format!("schema-{tweak}"); }
                    2 => { vp.credential.issuance_time ^= u64::from(tweak); }
                    3 => {
                        let mut sig = crate::encoding::b64url_decode(&vp.credential.issuer_signature).unwrap();
                        let idx = (tweak as usize) % sig.len();
                        sig[idx] ^= tweak;
                        vp.credential.issuer_signature = crate::encoding::b64url(&sig);
                    }
                    4 => {
                        let mut sig = crate::encoding::b64url_decode(&vp.holder_signature).unwrap();
                        let idx = (tweak as usize) % sig.len();
                        sig[idx] ^= tweak;
                        vp.holder_signature = crate::encoding::b64url(&sig);
                    }
                    _ => { vp.nonce[(tweak as usize) % NONCE_LEN] ^= tweak; }
                }

                let outcome = verify_presentation(&vp, &nonce, NOW, &f.resolver, &f.vdr);
                prop_assert_eq!(outcome.verdict, Verdict::Denied);
                prop_assert_ne!(outcome.reason, DenialReason::Ok);
            }
        }
    }
}
