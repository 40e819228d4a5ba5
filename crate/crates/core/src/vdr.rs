//! In-memory verifiable data registry: the single source of truth for DID
//! documents, credential schemas, and revocation registries.
//!
//! Writes require a proof signed by the owner key fixed at registration.
//! Configurable read/write delays emulate the access cost of a remote
//! ledger so benchmarks can reproduce resolution-dominated latency on any
//! machine. Delays are slept outside the state lock, so concurrent readers
//! do not serialize on the emulated latency.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::canonical_json;
use crate::identity::{verify, Did, DidDocument};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VdrError {
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// One registered DID with its current document and the key allowed to
/// mutate it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub did: Did,
    pub document: DidDocument,
    pub version: u64,
    pub owner_key: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaRecord {
    pub schema_id: String,
    pub attribute_names: Vec<String>,
    pub issuer: Did,
}

impl SchemaRecord {
    pub fn validate(&self) -> Result<(), VdrError> {
        if self.attribute_names.is_empty() {
            return Err(VdrError::Invalid("schema has no attributes".into()));
        }
        let unique: BTreeSet<&String> = self.attribute_names.iter().collect();
        if unique.len() != self.attribute_names.len() {
            return Err(VdrError::Invalid("schema attributes not unique".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RevocationRegistry {
    pub registry_id: String,
    pub issuer: Did,
    pub revoked: BTreeSet<String>,
}

/// Emulated ledger access latency. Defaults to zero for plain unit use.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdrConfig {
    #[serde(default)]
    pub read_delay: Duration,
    #[serde(default)]
    pub write_delay: Duration,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct VdrState {
    entries: BTreeMap<String, LedgerEntry>,
    schemas: BTreeMap<String, SchemaRecord>,
    registries: BTreeMap<String, RevocationRegistry>,
}

/// Process-local registry. All operations are atomic with respect to each
/// other; reads run concurrently.
pub struct Vdr {
    config: VdrConfig,
    state: RwLock<VdrState>,
}

/// Signature base for a revocation proof.
pub fn revocation_proof_bytes(registry_id: &str, credential_id: &str) -> Vec<u8> {
    canonical_json(&serde_json::json!({
        "action": "revoke",
        "registry_id": registry_id,
        "credential_id": credential_id,
    }))
}

impl Vdr {
    pub fn new(config: VdrConfig) -> Vdr {
        Vdr {
            config,
            state: RwLock::new(VdrState::default()),
        }
    }

    pub fn config(&self) -> VdrConfig {
        self.config
    }

    fn sleep_read(&self) {
        if !self.config.read_delay.is_zero() {
            std::thread::sleep(self.config.read_delay);
        }
    }

    fn sleep_write(&self) {
        if !self.config.write_delay.is_zero() {
            std::thread::sleep(self.config.write_delay);
        }
    }

    /// Registers a new DID document. The proof must be a signature over
    /// the document's canonical bytes by its first signing key, which
    /// becomes the owner key.
    pub fn register(&self, document: &DidDocument, proof: &[u8]) -> Result<u64, VdrError> {
        document
            .validate()
            .map_err(|e| VdrError::Invalid(e.to_string()))?;
        let signing = document
            .first_signing_key()
            .expect("validated document has a signing key");
        let public = signing
            .public_key()
            .map_err(|e| VdrError::Invalid(e.to_string()))?;
        if !verify(&public, &document.canonical_bytes(), proof) {
            return Err(VdrError::Unauthorized(format!(
                "registration proof does not verify for {}",
                document.id
            )));
        }
        self.sleep_write();
        let mut state = self.state.write().expect("vdr lock");
        let key = document.id.to_string();
        if state.entries.contains_key(&key) {
            return Err(VdrError::AlreadyExists(key));
        }
        let mut stored = document.clone();
        stored.version = 1;
        state.entries.insert(
            key,
            LedgerEntry {
                did: document.id.clone(),
                document: stored,
                version: 1,
                owner_key: signing.public_key_multibase.clone(),
            },
        );
        Ok(1)
    }

    /// Replaces the current document. Only a proof by the owner key fixed
    /// at registration is accepted; the version increments by exactly one.
    pub fn update(&self, did: &Did, document: &DidDocument, proof: &[u8]) -> Result<u64, VdrError> {
        if document.id != *did {
            return Err(VdrError::Invalid(format!(
                "document id {} does not match {did}",
                document.id
            )));
        }
        document
            .validate()
            .map_err(|e| VdrError::Invalid(e.to_string()))?;
        self.sleep_write();
        let mut state = self.state.write().expect("vdr lock");
        let entry = state
            .entries
            .get_mut(&did.to_string())
            .ok_or_else(|| VdrError::NotFound(did.to_string()))?;
        let (owner_kind, owner_public) = crate::encoding::decode_public_key(&entry.owner_key)
            .map_err(|e| VdrError::Invalid(e.to_string()))?;
        debug_assert_eq!(owner_kind, crate::identity::KeyKind::Signing);
        if !verify(&owner_public, &document.canonical_bytes(), proof) {
            return Err(VdrError::Unauthorized(format!(
                "update proof not signed by the owner of {did}"
            )));
        }
        entry.version += 1;
        let mut stored = document.clone();
        stored.version = entry.version;
        entry.document = stored;
        Ok(entry.version)
    }

    /// Returns the latest document and its version after the configured
    /// read delay.
    pub fn read_document(&self, did: &Did) -> Result<(DidDocument, u64), VdrError> {
        self.sleep_read();
        let state = self.state.read().expect("vdr lock");
        let entry = state
            .entries
            .get(&did.to_string())
            .ok_or_else(|| VdrError::NotFound(did.to_string()))?;
        Ok((entry.document.clone(), entry.version))
    }

    pub fn contains(&self, did: &Did) -> bool {
        self.state
            .read()
            .expect("vdr lock")
            .entries
            .contains_key(&did.to_string())
    }

    pub fn put_schema(&self, record: SchemaRecord) -> Result<(), VdrError> {
        record.validate()?;
        self.sleep_write();
        let mut state = self.state.write().expect("vdr lock");
        if state.schemas.contains_key(&record.schema_id) {
            return Err(VdrError::AlreadyExists(record.schema_id));
        }
        state.schemas.insert(record.schema_id.clone(), record);
        Ok(())
    }

    pub fn get_schema(&self, schema_id: &str) -> Result<SchemaRecord, VdrError> {
        let state = self.state.read().expect("vdr lock");
        state
            .schemas
            .get(schema_id)
            .cloned()
            .ok_or_else(|| VdrError::NotFound(schema_id.to_owned()))
    }

    pub fn create_registry(&self, registry_id: &str, issuer: &Did) -> Result<(), VdrError> {
        self.sleep_write();
        let mut state = self.state.write().expect("vdr lock");
        if state.registries.contains_key(registry_id) {
            return Err(VdrError::AlreadyExists(registry_id.to_owned()));
        }
        state.registries.insert(
            registry_id.to_owned(),
            RevocationRegistry {
                registry_id: registry_id.to_owned(),
                issuer: issuer.clone(),
                revoked: BTreeSet::new(),
            },
        );
        Ok(())
    }

    /// Marks a credential revoked. Requires a signature over
    /// [`revocation_proof_bytes`] by the registry issuer's current signing
    /// key. Revocation is monotone: entries are never removed.
    pub fn revoke(
        &self,
        registry_id: &str,
        credential_id: &str,
        proof: &[u8],
    ) -> Result<(), VdrError> {
        self.sleep_write();
        let mut state = self.state.write().expect("vdr lock");
        let issuer = state
            .registries
            .get(registry_id)
            .ok_or_else(|| VdrError::NotFound(registry_id.to_owned()))?
            .issuer
            .clone();
        let issuer_entry = state
            .entries
            .get(&issuer.to_string())
            .ok_or_else(|| VdrError::NotFound(issuer.to_string()))?;
        let issuer_key = issuer_entry
            .document
            .first_signing_key()
            .ok_or_else(|| VdrError::Invalid("issuer document has no signing key".into()))?
            .public_key()
            .map_err(|e| VdrError::Invalid(e.to_string()))?;
        let base = revocation_proof_bytes(registry_id, credential_id);
        if !verify(&issuer_key, &base, proof) {
            return Err(VdrError::Unauthorized(format!(
                "revocation of {credential_id} not signed by issuer of {registry_id}"
            )));
        }
        state
            .registries
            .get_mut(registry_id)
            .expect("registry present")
            .revoked
            .insert(credential_id.to_owned());
        Ok(())
    }

    pub fn is_revoked(&self, registry_id: &str, credential_id: &str) -> Result<bool, VdrError> {
        let state = self.state.read().expect("vdr lock");
        let registry = state
            .registries
            .get(registry_id)
            .ok_or_else(|| VdrError::NotFound(registry_id.to_owned()))?;
        Ok(registry.revoked.contains(credential_id))
    }

    /// Canonical serialization of the whole registry, for deterministic
    /// benchmark reruns.
    pub fn export_snapshot(&self) -> Vec<u8> {
        let state = self.state.read().expect("vdr lock");
        canonical_json(&*state)
    }

    pub fn import_snapshot(&self, bytes: &[u8]) -> Result<(), VdrError> {
        let imported: VdrState = serde_json::from_slice(bytes)
            .map_err(|e| VdrError::Invalid(format!("snapshot does not parse: {e}")))?;
        *self.state.write().expect("vdr lock") = imported;
        Ok(())
    }
}

impl Default for Vdr {
    fn default() -> Vdr {
        Vdr::new(VdrConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{generate_identity, Identity, ServiceEndpoint};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::time::Instant;

    fn identity(rng: &mut ChaCha20Rng) -> Identity {
        generate_identity("sba", "http://localhost:1/didcomm", rng).unwrap()
    }

    #[test]
    fn register_then_read() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let id = identity(&mut rng);
        let vdr = Vdr::default();
        assert_eq!(vdr.register(&id.document, &id.document_proof()).unwrap(), 1);
        let (doc, version) = vdr.read_document(&id.did).unwrap();
        assert_eq!(version, 1);
        assert_eq!(doc.id, id.did);
        assert_eq!(doc.version, 1);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let id = identity(&mut rng);
        let vdr = Vdr::default();
        vdr.register(&id.document, &id.document_proof()).unwrap();
        assert!(matches!(
            vdr.register(&id.document, &id.document_proof()),
            Err(VdrError::AlreadyExists(_))
        ));
    }

    #[test]
    fn foreign_proof_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let id = identity(&mut rng);
        let stranger = identity(&mut rng);
        let vdr = Vdr::default();
        let forged = stranger.sign(&id.document.canonical_bytes());
        assert!(matches!(
            vdr.register(&id.document, &forged),
            Err(VdrError::Unauthorized(_))
        ));
    }

    #[test]
    fn owner_update_increments_version() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let id = identity(&mut rng);
        let vdr = Vdr::default();
        vdr.register(&id.document, &id.document_proof()).unwrap();

        let mut updated = id.document.clone();
        updated.service_endpoints = vec![ServiceEndpoint {
            id: format!("{}#didcomm", id.did),
            endpoint_type: "DIDCommMessaging".into(),
            uri: "http://localhost:2/didcomm".into(),
        }];
        let proof = id.sign(&updated.canonical_bytes());
        assert_eq!(vdr.update(&id.did, &updated, &proof).unwrap(), 2);

        let (doc, version) = vdr.read_document(&id.did).unwrap();
        assert_eq!(version, 2);
        assert_eq!(doc.endpoint_uri(), Some("http://localhost:2/didcomm"));
    }

    #[test]
    fn non_owner_update_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let id = identity(&mut rng);
        let attacker = identity(&mut rng);
        let vdr = Vdr::default();
        vdr.register(&id.document, &id.document_proof()).unwrap();
        vdr.register(&attacker.document, &attacker.document_proof())
            .unwrap();

        let mut updated = id.document.clone();
        updated.service_endpoints[0].uri = "http://evil".into();
        let forged = attacker.sign(&updated.canonical_bytes());
        assert!(matches!(
            vdr.update(&id.did, &updated, &forged),
            Err(VdrError::Unauthorized(_))
        ));
        let (doc, _) = vdr.read_document(&id.did).unwrap();
        assert_eq!(doc.endpoint_uri(), Some("http://localhost:1/didcomm"));
    }

    #[test]
    fn unknown_did_not_found() {
        let vdr = Vdr::default();
        let did = "did:sba:2NEpo7TZRRrLZSi2U".parse().unwrap();
        assert!(matches!(
            vdr.read_document(&did),
            Err(VdrError::NotFound(_))
        ));
    }

    // Sequential oracle: replay a register/update log into a plain map and
    // compare every read against the oracle's view.
    #[test]
    fn read_matches_sequential_replay_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let id = identity(&mut rng);
        let vdr = Vdr::default();

        let mut oracle: Vec<DidDocument> = Vec::new();

        vdr.register(&id.document, &id.document_proof()).unwrap();
        let mut v1 = id.document.clone();
        v1.version = 1;
        oracle.push(v1);

        let mut doc = id.document.clone();
        for step in 2..=5u64 {
            doc.service_endpoints[0].uri = format!("http://localhost:{step}/didcomm");
            let proof = id.sign(&doc.canonical_bytes());
            let version = vdr.update(&id.did, &doc, &proof).unwrap();
            assert_eq!(version, step);
            let mut snapshot = doc.clone();
            snapshot.version = step;
            oracle.push(snapshot);

            let (read, read_version) = vdr.read_document(&id.did).unwrap();
            assert_eq!(read_version, step);
            assert_eq!(&read, oracle.last().unwrap());
        }
    }

    #[test]
    fn read_delay_is_enforced() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let id = identity(&mut rng);
        let vdr = Vdr::new(VdrConfig {
            read_delay: Duration::from_millis(14),
            write_delay: Duration::ZERO,
        });
        vdr.register(&id.document, &id.document_proof()).unwrap();
        let start = Instant::now();
        vdr.read_document(&id.did).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(14));
    }

    #[test]
    fn schema_round_trip_and_duplicates() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let id = identity(&mut rng);
        let vdr = Vdr::default();
        let record = SchemaRecord {
            schema_id: "nf-authorization-v1".into(),
            attribute_names: vec!["nf_type".into(), "allowed_service".into(), "expiry".into()],
            issuer: id.did.clone(),
        };
        vdr.put_schema(record.clone()).unwrap();
        assert_eq!(vdr.get_schema("nf-authorization-v1").unwrap(), record);
        assert!(matches!(
            vdr.put_schema(record),
            Err(VdrError::AlreadyExists(_))
        ));
        assert!(matches!(
            vdr.get_schema("missing"),
            Err(VdrError::NotFound(_))
        ));
    }

    #[test]
    fn schema_validation() {
        let issuer: Did = "did:sba:2NEpo7TZRRrLZSi2U".parse().unwrap();
        let empty = SchemaRecord {
            schema_id: "s".into(),
            attribute_names: vec![],
            issuer: issuer.clone(),
        };
        assert!(matches!(empty.validate(), Err(VdrError::Invalid(_))));
        let dup = SchemaRecord {
            schema_id: "s".into(),
            attribute_names: vec!["a".into(), "a".into()],
            issuer,
        };
        assert!(matches!(dup.validate(), Err(VdrError::Invalid(_))));
    }

    #[test]
    fn revocation_lifecycle() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let issuer = identity(&mut rng);
        let outsider = identity(&mut rng);
        let vdr = Vdr::default();
        vdr.register(&issuer.document, &issuer.document_proof())
            .unwrap();
        vdr.register(&outsider.document, &outsider.document_proof())
            .unwrap();
        vdr.create_registry("rev-1", &issuer.did).unwrap();
        assert!(matches!(
            vdr.create_registry("rev-1", &issuer.did),
            Err(VdrError::AlreadyExists(_))
        ));

        assert!(!vdr.is_revoked("rev-1", "cred-1").unwrap());

        let forged = outsider.sign(&revocation_proof_bytes("rev-1", "cred-1"));
        assert!(matches!(
            vdr.revoke("rev-1", "cred-1", &forged),
            Err(VdrError::Unauthorized(_))
        ));
        assert!(!vdr.is_revoked("rev-1", "cred-1").unwrap());

        let proof = issuer.sign(&revocation_proof_bytes("rev-1", "cred-1"));
        vdr.revoke("rev-1", "cred-1", &proof).unwrap();
        assert!(vdr.is_revoked("rev-1", "cred-1").unwrap());

        // Revoking again stays revoked; the set is monotone.
        vdr.revoke("rev-1", "cred-1", &proof).unwrap();
        assert!(vdr.is_revoked("rev-1", "cred-1").unwrap());

        assert!(matches!(
            vdr.is_revoked("rev-x", "cred-1"),
            Err(VdrError::NotFound(_))
        ));
    }

    #[test]
    fn snapshot_export_import_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let id = identity(&mut rng);
        let vdr = Vdr::default();
        vdr.register(&id.document, &id.document_proof()).unwrap();
        vdr.create_registry("rev-1", &id.did).unwrap();
        let snapshot = vdr.export_snapshot();

        let restored = Vdr::default();
        restored.import_snapshot(&snapshot).unwrap();
        assert_eq!(restored.export_snapshot(), snapshot);
        let (doc, version) = restored.read_document(&id.did).unwrap();
        assert_eq!(version, 1);
        assert_eq!(doc.id, id.did);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // Ownership: no interleaving of non-owner operations changes a
        // stored document; versions advance strictly sequentially.
        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn non_owners_never_mutate(ops in proptest::collection::vec(0u8..4, 1..40)) {
                let mut rng = ChaCha20Rng::seed_from_u64(11);
                let owner = identity(&mut rng);
                let attacker = identity(&mut rng);
                let vdr = Vdr::default();
                vdr.register(&owner.document, &owner.document_proof()).unwrap();
                vdr.register(&attacker.document, &attacker.document_proof()).unwrap();

                let mut expected_version = 1u64;
                let mut expected_uri = owner.document.endpoint_uri().unwrap().to_owned();

                for (step, op) in ops.iter().enumerate() {
                    let mut doc = owner.document.clone();
                    doc.service_endpoints[0].uri = format!("http://localhost:{step}/didcomm");
                    match op {
                        0 => {
                            // Owner-signed update: accepted.
                            let proof = owner.sign(&doc.canonical_bytes());
                            let v = vdr.update(&owner.did, &doc, &proof).unwrap();
                            expected_version += 1;
                            prop_assert_eq!(v, expected_version);
                            expected_uri = doc.service_endpoints[0].uri.clone();
                        }
                        1 => {
                            // Attacker-signed update: rejected.
                            let proof = attacker.sign(&doc.canonical_bytes());
                            prop_assert!(vdr.update(&owner.did, &doc, &proof).is_err());
                        }
                        2 => {
                            // Random-garbage proof: rejected.
                            prop_assert!(vdr.update(&owner.did, &doc, &[0u8; 64]).is_err());
                        }
                        _ => {
                            // Re-registration attempt: rejected.
                            prop_assert!(vdr.register(&doc, &owner.sign(&doc.canonical_bytes())).is_err());
                        }
                    }
                    let (read, version) = vdr.read_document(&owner.did).unwrap();
                    prop_assert_eq!(version, expected_version);
                    prop_assert_eq!(read.endpoint_uri().unwrap(), expected_uri.as_str());
                }
            }
        }
    }
}
