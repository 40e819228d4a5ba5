//! Agent wallet: identities with their secrets, pairwise connections, and
//! held credentials. API summaries never include secret material; the
//! secret-bearing [`Identity`] values stay inside the agent process.

use std::collections::HashMap;

use didnet_core::{ConnectionRecord, Did, Identity, VerifiableCredential};
use serde::Serialize;

#[derive(Default)]
pub struct Wallet {
    identities: Vec<Identity>,
    connections: HashMap<String, ConnectionRecord>,
    credentials: Vec<VerifiableCredential>,
}

/// Secret-free projection of an identity for API responses.
#[derive(Debug, Clone, Serialize)]
pub struct IdentitySummary {
    pub did: String,
    pub key_ids: Vec<String>,
    pub endpoint: Option<String>,
}

impl Wallet {
    pub fn add_identity(&mut self, identity: Identity) {
        self.identities.push(identity);
    }

    pub fn primary(&self) -> Option<&Identity> {
        self.identities.first()
    }

    pub fn identity(&self, did: &Did) -> Option<&Identity> {
        self.identities.iter().find(|i| i.did == *did)
    }

    pub fn identity_summaries(&self) -> Vec<IdentitySummary> {
        self.identities
            .iter()
            .map(|i| IdentitySummary {
                did: i.did.to_string(),
                key_ids: vec![i.signing.key_id.clone(), i.agreement.key_id.clone()],
                endpoint: i.document.endpoint_uri().map(str::to_owned),
            })
            .collect()
    }

    pub fn insert_connection(&mut self, record: ConnectionRecord) {
        self.connections.insert(record.connection_id.clone(), record);
    }

    pub fn connection(&self, connection_id: &str) -> Option<&ConnectionRecord> {
        self.connections.get(connection_id)
    }

    /// Latest complete connection with the given peer.
    pub fn connection_with_peer(&self, peer: &Did) -> Option<&ConnectionRecord> {
        self.connections
            .values()
            .find(|r| r.is_complete() && r.their_did.as_ref() == Some(peer))
    }

    /// Complete connection whose peer agreement key matches, used to route
    /// inbound envelopes to the right record.
    pub fn connection_with_peer_key(&self, key_multibase: &str) -> Option<&ConnectionRecord> {
        self.connections.values().find(|r| {
            r.is_complete()
                && r.their_document
                    .as_ref()
                    .and_then(|d| d.first_agreement_key())
                    .is_some_and(|m| m.public_key_multibase == key_multibase)
        })
    }

    pub fn connections(&self) -> Vec<&ConnectionRecord> {
        let mut records: Vec<&ConnectionRecord> = self.connections.values().collect();
        records.sort_by(|a, b| a.connection_id.cmp(&b.connection_id));
        records
    }

    pub fn store_credential(&mut self, credential: VerifiableCredential) {
        self.credentials.push(credential);
    }

    pub fn credentials(&self) -> &[VerifiableCredential] {
        &self.credentials
    }

    pub fn credential_by_schema(&self, schema_id: &str) -> Option<&VerifiableCredential> {
        self.credentials.iter().find(|c| c.schema_id == schema_id)
    }
}
