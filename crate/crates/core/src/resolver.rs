//! DID resolution over the registry with a configurable cache policy and
//! read-counting metrics.
//!
//! The default policy performs one ledger read per resolve call, which is
//! what makes stateless envelope processing expensive; the TTL policy
//! exists to quantify how much a short-lived document cache recovers.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{Did, DidDocument};
use crate::vdr::{Vdr, VdrError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("DID not resolvable: {0}")]
    NotFound(String),
    #[error("registry error: {0}")]
    Registry(String),
}

impl From<VdrError> for ResolveError {
    fn from(e: VdrError) -> ResolveError {
        match e {
            VdrError::NotFound(what) => ResolveError::NotFound(what),
            other => ResolveError::Registry(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CachePolicy {
    /// Every resolve performs a ledger read.
    None,
    /// A document read within `ttl` of a previous read for the same DID is
    /// served from cache. Never invalidated by writes.
    Ttl(Duration),
}

impl Default for CachePolicy {
    fn default() -> CachePolicy {
        CachePolicy::None
    }
}

/// Monotone counters describing resolver work since the last reset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverMetrics {
    pub ledger_reads: u64,
    pub cache_hits: u64,
    pub total_resolve_time: Duration,
}

struct CacheSlot {
    document: DidDocument,
    fetched_at: Instant,
}

/// Resolution front-end. Resolving never mutates registry state; metrics
/// and cache updates are internally synchronized so concurrent resolve
/// calls are safe.
pub struct Resolver {
    vdr: Arc<Vdr>,
    policy: CachePolicy,
    cache: Mutex<HashMap<String, CacheSlot>>,
    ledger_reads: AtomicU64,
    cache_hits: AtomicU64,
    resolve_nanos: AtomicU64,
}

impl Resolver {
    pub fn new(vdr: Arc<Vdr>, policy: CachePolicy) -> Resolver {
        Resolver {
            vdr,
            policy,
            cache: Mutex::new(HashMap::new()),
            ledger_reads: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            resolve_nanos: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn vdr(&self) -> &Arc<Vdr> {
        &self.vdr
    }

    pub fn resolve(&self, did: &Did) -> Result<DidDocument, ResolveError> {
        let start = Instant::now();
        let result = self.resolve_inner(did);
        self.resolve_nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        result
    }

    fn resolve_inner(&self, did: &Did) -> Result<DidDocument, ResolveError> {
        if let CachePolicy::Ttl(ttl) = self.policy {
            let key = did.to_string();
            {
                let cache = self.cache.lock().expect("resolver cache lock");
                if let Some(slot) = cache.get(&key) {
                    if slot.fetched_at.elapsed() < ttl {
                        self.cache_hits.fetch_add(1, Ordering::Relaxed);
                        return Ok(slot.document.clone());
                    }
                }
            }
            let document = self.ledger_read(did)?;
            self.cache.lock().expect("resolver cache lock").insert(
                key,
                CacheSlot {
                    document: document.clone(),
                    fetched_at: Instant::now(),
                },
            );
            Ok(document)
        } else {
            self.ledger_read(did)
        }
    }

    fn ledger_read(&self, did: &Did) -> Result<DidDocument, ResolveError> {
        self.ledger_reads.fetch_add(1, Ordering::Relaxed);
        let (document, _version) = self.vdr.read_document(did)?;
        Ok(document)
    }

    pub fn snapshot_metrics(&self) -> ResolverMetrics {
        ResolverMetrics {
            ledger_reads: self.ledger_reads.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            total_resolve_time: Duration::from_nanos(self.resolve_nanos.load(Ordering::Relaxed)),
        }
    }

    pub fn reset_metrics(&self) {
        self.ledger_reads.store(0, Ordering::Relaxed);
        self.cache_hits.store(0, Ordering::Relaxed);
        self.resolve_nanos.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::{generate_identity, Identity};
    use crate::vdr::VdrConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn setup(config: VdrConfig) -> (Arc<Vdr>, Identity) {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let id = generate_identity("sba", "http://localhost:1/didcomm", &mut rng).unwrap();
        let vdr = Arc::new(Vdr::new(config));
        vdr.register(&id.document, &id.document_proof()).unwrap();
        (vdr, id)
    }

    #[test]
    fn mode_none_reads_every_time() {
        let (vdr, id) = setup(VdrConfig::default());
        let resolver = Resolver::new(vdr, CachePolicy::None);
        resolver.resolve(&id.did).unwrap();
        resolver.resolve(&id.did).unwrap();
        let m = resolver.snapshot_metrics();
        assert_eq!(m.ledger_reads, 2);
        assert_eq!(m.cache_hits, 0);
    }

    #[test]
    fn ttl_serves_from_cache() {
        let (vdr, id) = setup(VdrConfig::default());
        let resolver = Resolver::new(vdr, CachePolicy::Ttl(Duration::from_secs(60)));
        resolver.resolve(&id.did).unwrap();
        resolver.resolve(&id.did).unwrap();
        let m = resolver.snapshot_metrics();
        assert_eq!(m.ledger_reads, 1);
        assert_eq!(m.cache_hits, 1);
    }

    #[test]
    fn ttl_expiry_reads_again() {
        let (vdr, id) = setup(VdrConfig::default());
        let resolver = Resolver::new(vdr, CachePolicy::Ttl(Duration::from_millis(30)));
        resolver.resolve(&id.did).unwrap();
        std::thread::sleep(Duration::from_millis(40));
        resolver.resolve(&id.did).unwrap();
        let m = resolver.snapshot_metrics();
        assert_eq!(m.ledger_reads, 2);
        assert_eq!(m.cache_hits, 0);
    }

    #[test]
    fn not_found_propagates() {
        let (vdr, _) = setup(VdrConfig::default());
        let resolver = Resolver::new(vdr, CachePolicy::None);
        let unknown: Did = "did:sba:2NEpo7TZRRrLZSi2U".parse().unwrap();
        assert!(matches!(
            resolver.resolve(&unknown),
            Err(ResolveError::NotFound(_))
        ));
    }

    #[test]
    fn reset_zeroes_counters() {
        let (vdr, id) = setup(VdrConfig::default());
        let resolver = Resolver::new(vdr, CachePolicy::None);
        resolver.resolve(&id.did).unwrap();
        resolver.reset_metrics();
        assert_eq!(resolver.snapshot_metrics(), ResolverMetrics::default());
    }

    // Derived bound: total resolve time dominates the sum of injected
    // ledger delays.
    #[test]
    fn resolve_time_accumulates_injected_delay() {
        let delay = Duration::from_millis(5);
        let (vdr, id) = setup(VdrConfig {
            read_delay: delay,
            write_delay: Duration::ZERO,
        });
        let resolver = Resolver::new(vdr, CachePolicy::None);
        let n = 4u32;
        for _ in 0..n {
            resolver.resolve(&id.did).unwrap();
        }
        let m = resolver.snapshot_metrics();
        assert_eq!(m.ledger_reads, u64::from(n));
        assert!(m.total_resolve_time >= delay * n);
    }

    #[test]
    fn resolution_is_read_only() {
        let (vdr, id) = setup(VdrConfig::default());
        let before = vdr.export_snapshot();
        let resolver = Resolver::new(vdr.clone(), CachePolicy::None);
        resolver.resolve(&id.did).unwrap();
        assert_eq!(vdr.export_snapshot(), before);
    }

    #[test]
    fn cached_document_never_older_than_ttl() {
        let (vdr, id) = setup(VdrConfig::default());
        let ttl = Duration::from_millis(25);
        let resolver = Resolver::new(vdr.clone(), CachePolicy::Ttl(ttl));
        resolver.resolve(&id.did).unwrap();

        // Write a new endpoint behind the resolver's back.
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let same = generate_identity("sba", "http://x", &mut rng);
        drop(same);
        let mut updated = id.document.clone();
        updated.service_endpoints[0].uri = "http://localhost:9/didcomm".into();
        let proof = id.sign(&updated.canonical_bytes());
        vdr.update(&id.did, &updated, &proof).unwrap();

        // Within the ttl the stale document may be served.
        let doc = resolver.resolve(&id.did).unwrap();
        assert_eq!(doc.endpoint_uri(), Some("http://localhost:1/didcomm"));

        // After the ttl the new version must be visible.
        std::thread::sleep(ttl + Duration::from_millis(5));
        let doc = resolver.resolve(&id.did).unwrap();
        assert_eq!(doc.endpoint_uri(), Some("http://localhost:9/didcomm"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            // Count identity: ledger reads plus cache hits equals resolve calls.
            #[test]
            fn reads_plus_hits_equals_calls(calls in 1usize..40, use_ttl in any::<bool>()) {
                let (vdr, id) = setup(VdrConfig::default());
                let policy = if use_ttl {
                    CachePolicy::Ttl(Duration::from_secs(300))
                } else {
                    CachePolicy::None
                };
                let resolver = Resolver::new(vdr, policy);
                for _ in 0..calls {
                    resolver.resolve(&id.did).unwrap();
                }
                let m = resolver.snapshot_metrics();
                prop_assert_eq!(m.ledger_reads + m.cache_hits, calls as u64);
            }
        }
    }
}
