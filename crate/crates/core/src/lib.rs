//! DID-based secure messaging for service-based core networks.
//!
//! This crate provides the protocol stack an NF-side communication agent
//! is built from:
//!
//! - [`identity`]: DIDs, key pairs, DID documents, signing.
//! - [`vdr`]: the verifiable data registry holding documents, credential
//!   schemas, and revocation registries, with owner-only writes and
//!   injectable access latency.
//! - [`resolver`]: DID resolution with cache policies and read metrics.
//! - [`credentials`]: verifiable credentials and nonce-bound
//!   presentations replacing bearer-token authorization.
//! - [`didcomm`]: the two envelope protocols — the stateful v1 variant
//!   (connection setup, compact headerless envelopes) and the stateless
//!   v2 variant (headered, signed, encrypted per message).
//!
//! Transport, agents, and benchmark orchestration live in the companion
//! crates.

pub mod canon;
pub mod credentials;
pub mod didcomm;
pub mod encoding;
pub mod identity;
pub mod resolver;
pub mod vdr;

pub use credentials::{
    define_schema, issue, present, verify_presentation, CredentialError, DenialReason,
    VerifiableCredential, VerifiablePresentation, VerificationOutcome, Verdict,
};
pub use didcomm::v1::{
    create_invitation, pack_v1, process_complete, process_invitation, process_request,
    process_response, unpack_v1, ConnectionRecord, ConnectionState, EnvelopeV1, ExchangeMessage,
};
pub use didcomm::v2::{canonical_jwm_bytes, pack_v2, unpack_v2, EnvelopeV2, Jwm, PackedV2};
pub use didcomm::EnvelopeError;
pub use identity::{
    generate, generate_identity, parse_did, sign, subject_for_signing_key, verify, Did,
    DidDocument, DidError, Identity, KeyKind, KeyPair, ServiceEndpoint, VerificationMethod,
};
pub use resolver::{CachePolicy, ResolveError, Resolver, ResolverMetrics};
pub use vdr::{
    revocation_proof_bytes, LedgerEntry, RevocationRegistry, SchemaRecord, Vdr, VdrConfig,
    VdrError,
};
