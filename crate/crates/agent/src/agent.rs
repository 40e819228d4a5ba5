//! The per-NF communication agent: one DID-holding wallet, protocol
//! middleware for either envelope variant or the TLS baseline, an HTTP
//! external endpoint for inbound envelopes, and internal endpoints for the
//! NF-side business logic.
//!
//! Every send produces a [`DeliveryReceipt`] with phase timestamps taken
//! on the shared process epoch: submit, encapsulation bounds, wire bounds,
//! decapsulation bounds (reported back by the receiver), and delivery.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use didnet_core::didcomm::{v1, v2, MAGIC_V1_ENVELOPE, MAGIC_V1_EXCHANGE, MAGIC_V2_ENVELOPE};
use didnet_core::{
    CachePolicy, ConnectionRecord, Did, EnvelopeError, EnvelopeV1, EnvelopeV2, ExchangeMessage,
    Identity, Resolver, Vdr, VerifiableCredential,
};
use rustls::pki_types::CertificateDer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::{self, ByteCounters, CountingStream, Request, Response, Server, StreamBuf};
use crate::receipt::{now_nanos, DeliveryReceipt, InboundReport, PhaseTimestamps};
use crate::tls::{build_context, TlsContext, TlsError, TlsIdentity};
use crate::wallet::{IdentitySummary, Wallet};

const EXCHANGE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    V1,
    V2,
    Tls,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::V1 => "v1",
            Protocol::V2 => "v2",
            Protocol::Tls => "tls",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Protocol, String> {
        match s {
            "v1" => Ok(Protocol::V1),
            "v2" => Ok(Protocol::V2),
            "tls" => Ok(Protocol::Tls),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("destination not available: {0}")]
    NotFound(String),
    #[error("no identity in wallet")]
    NoIdentity,
    #[error("delivery failed during {phase}: {detail}")]
    Delivery { phase: &'static str, detail: String },
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("resolution failed: {0}")]
    Resolution(#[from] didnet_core::ResolveError),
    #[error("tls failure: {0}")]
    Tls(#[from] TlsError),
}

/// TLS material handed to an agent running the baseline transport.
pub struct TlsSetup {
    pub identity: TlsIdentity,
    pub trusted_peers: Vec<CertificateDer<'static>>,
}

pub struct AgentConfig {
    pub nf_name: String,
    pub listen_addr: SocketAddr,
    pub protocol: Protocol,
    pub cache_policy: CachePolicy,
    pub did_method: String,
    pub tls: Option<TlsSetup>,
}

impl AgentConfig {
    pub fn new(nf_name: &str, protocol: Protocol) -> AgentConfig {
        AgentConfig {
            nf_name: nf_name.to_owned(),
            listen_addr: "127.0.0.1:0".parse().expect("loopback parses"),
            protocol,
            cache_policy: CachePolicy::None,
            did_method: "sba".into(),
            tls: None,
        }
    }
}

/// A message as handed to the business-logic handler.
#[derive(Debug, Clone)]
pub struct InboundMessage {
    pub sender: Option<Did>,
    pub message_type: Option<String>,
    pub body: Vec<u8>,
    pub received_at: u64,
}

pub type MessageHandler = Arc<dyn Fn(&InboundMessage) -> Option<Vec<u8>> + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct AgentStats {
    pub delivered: u64,
    pub integrity_failures: u64,
    pub format_rejections: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TlsSessionInfo {
    pub handshake_bytes: u64,
    pub handshake_nanos: u64,
    pub reused: bool,
}

struct PendingExchange {
    record: ConnectionRecord,
    peer: Option<Did>,
    bytes: u64,
}

struct TlsSession {
    stream: StreamBuf<rustls::StreamOwned<rustls::ClientConnection, CountingStream<TcpStream>>>,
    authority: String,
    info: TlsSessionInfo,
}

struct AgentInner {
    nf_name: String,
    protocol: Protocol,
    did_method: String,
    local_addr: SocketAddr,
    vdr: Arc<Vdr>,
    resolver: Arc<Resolver>,
    wallet: Mutex<Wallet>,
    connections_changed: Condvar,
    pending_exchanges: Mutex<HashMap<String, PendingExchange>>,
    finished_exchange_bytes: Mutex<HashMap<String, u64>>,
    receipts: Mutex<HashMap<String, DeliveryReceipt>>,
    delivered: Mutex<Vec<InboundMessage>>,
    handler: RwLock<Option<MessageHandler>>,
    delivered_count: AtomicU64,
    integrity_failures: AtomicU64,
    format_rejections: AtomicU64,
    tls_context: Option<TlsContext>,
    tls_cert: Option<CertificateDer<'static>>,
    tls_sessions: Mutex<HashMap<String, Arc<Mutex<TlsSession>>>>,
    peer_addresses: Mutex<HashMap<String, String>>,
}

pub struct Agent {
    inner: Arc<AgentInner>,
    server: Mutex<Option<Server>>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after epoch")
        .as_secs()
}

fn fresh_id() -> String {
    let mut bytes = [0u8; 16];
    rand::RngCore::fill_bytes(&mut rand::rngs::OsRng, &mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

impl Agent {
    /// Binds the listener, creates and registers the agent's primary
    /// identity (endpoint pointing at the bound port), and starts serving.
    pub fn start<R: rand::RngCore + rand::CryptoRng>(
        config: AgentConfig,
        vdr: Arc<Vdr>,
        rng: &mut R,
    ) -> Result<Agent, AgentError> {
        let listener = TcpListener::bind(config.listen_addr)
            .map_err(|e| AgentError::Startup(format!("bind {}: {e}", config.listen_addr)))?;
        let local_addr = listener
            .local_addr()
            .map_err(|e| AgentError::Startup(e.to_string()))?;

        let (tls_context, tls_cert) = match (&config.protocol, config.tls) {
            (Protocol::Tls, Some(setup)) => {
                let cert = setup.identity.cert.clone();
                let context = build_context(&setup.identity, &setup.trusted_peers)?;
                (Some(context), Some(cert))
            }
            (Protocol::Tls, None) => {
                return Err(AgentError::Startup(
                    "tls protocol requires TLS material".into(),
                ))
            }
            (_, _) => (None, None),
        };

        let scheme = if tls_context.is_some() { "https" } else { "http" };
        let endpoint = format!("{scheme}://127.0.0.1:{}/didcomm", local_addr.port());
        let identity = didnet_core::generate_identity(&config.did_method, &endpoint, rng)
            .map_err(|e| AgentError::Startup(e.to_string()))?;
        vdr.register(&identity.document, &identity.document_proof())
            .map_err(|e| AgentError::Startup(format!("registering {}: {e}", identity.did)))?;

        let resolver = Arc::new(Resolver::new(vdr.clone(), config.cache_policy));
        let mut wallet = Wallet::default();
        wallet.add_identity(identity);

        let inner = Arc::new(AgentInner {
            nf_name: config.nf_name,
            protocol: config.protocol,
            did_method: config.did_method,
            local_addr,
            vdr,
            resolver,
            wallet: Mutex::new(wallet),
            connections_changed: Condvar::new(),
            pending_exchanges: Mutex::new(HashMap::new()),
            finished_exchange_bytes: Mutex::new(HashMap::new()),
            receipts: Mutex::new(HashMap::new()),
            delivered: Mutex::new(Vec::new()),
            handler: RwLock::new(None),
            delivered_count: AtomicU64::new(0),
            integrity_failures: AtomicU64::new(0),
            format_rejections: AtomicU64::new(0),
            tls_context: tls_context.clone(),
            tls_cert,
            tls_sessions: Mutex::new(HashMap::new()),
            peer_addresses: Mutex::new(HashMap::new()),
        });

        let dispatch_inner = inner.clone();
        let server = Server::start(
            listener,
            tls_context.map(|c| c.server),
            Arc::new(move |request| dispatch(&dispatch_inner, request)),
        )
        .map_err(|e| AgentError::Startup(e.to_string()))?;

        Ok(Agent {
            inner,
            server: Mutex::new(Some(server)),
        })
    }

    pub fn stop(&self) {
        if let Some(mut server) = self.server.lock().expect("server lock").take() {
            server.stop();
        }
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.local_addr
    }

    pub fn nf_name(&self) -> &str {
        &self.inner.nf_name
    }

    pub fn protocol(&self) -> Protocol {
        self.inner.protocol
    }

    pub fn did(&self) -> Did {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .primary()
            .expect("agent has a primary identity")
            .did
            .clone()
    }

    pub fn primary_identity(&self) -> Identity {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .primary()
            .expect("agent has a primary identity")
            .clone()
    }

    pub fn endpoint(&self) -> String {
        let scheme = if self.inner.tls_context.is_some() {
            "https"
        } else {
            "http"
        };
        format!("{scheme}://127.0.0.1:{}/didcomm", self.inner.local_addr.port())
    }

    pub fn resolver(&self) -> &Arc<Resolver> {
        &self.inner.resolver
    }

    pub fn vdr(&self) -> &Arc<Vdr> {
        &self.inner.vdr
    }

    pub fn tls_cert(&self) -> Option<CertificateDer<'static>> {
        self.inner.tls_cert.clone()
    }

    /// Registers the inbound business-logic handler. Each accepted message
    /// is handed over exactly once, in per-sender arrival order; a returned
    /// body is sent back to the sender as a new message.
    pub fn set_handler(&self, handler: MessageHandler) {
        *self.inner.handler.write().expect("handler lock") = Some(handler);
    }

    pub fn send(
        &self,
        destination: &Did,
        message_type: &str,
        body: &[u8],
    ) -> Result<DeliveryReceipt, AgentError> {
        AgentInner::send(&self.inner, destination, message_type, body)
    }

    /// Establishes (or reuses) the mutually authenticated baseline session
    /// to a peer and reports its handshake cost.
    pub fn tls_baseline_session(&self, destination: &Did) -> Result<TlsSessionInfo, AgentError> {
        let (session, first) = self.inner.ensure_tls_session(destination)?;
        match first {
            Some(info) => Ok(info),
            None => {
                let session = session.lock().expect("tls session lock");
                Ok(TlsSessionInfo {
                    reused: true,
                    ..session.info
                })
            }
        }
    }

    pub fn set_peer_address(&self, did: &Did, authority: &str) {
        self.inner
            .peer_addresses
            .lock()
            .expect("peer lock")
            .insert(did.to_string(), authority.to_owned());
    }

    pub fn stats(&self) -> AgentStats {
        AgentStats {
            delivered: self.inner.delivered_count.load(Ordering::Relaxed),
            integrity_failures: self.inner.integrity_failures.load(Ordering::Relaxed),
            format_rejections: self.inner.format_rejections.load(Ordering::Relaxed),
        }
    }

    pub fn delivered_messages(&self) -> Vec<InboundMessage> {
        self.inner.delivered.lock().expect("delivered lock").clone()
    }

    pub fn receipt(&self, receipt_id: &str) -> Option<DeliveryReceipt> {
        self.inner
            .receipts
            .lock()
            .expect("receipts lock")
            .get(receipt_id)
            .cloned()
    }

    pub fn list_connections(&self) -> Vec<ConnectionRecord> {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .connections()
            .into_iter()
            .cloned()
            .collect()
    }

    pub fn list_identities(&self) -> Vec<IdentitySummary> {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .identity_summaries()
    }

    /// Creates a fresh identity in the wallet and registers it on the VDR.
    pub fn create_identity(&self) -> Result<IdentitySummary, AgentError> {
        self.inner.create_identity()
    }

    pub fn store_credential(&self, credential: VerifiableCredential) {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .store_credential(credential);
    }

    pub fn credentials(&self) -> Vec<VerifiableCredential> {
        self.inner
            .wallet
            .lock()
            .expect("wallet lock")
            .credentials()
            .to_vec()
    }
}

impl Drop for Agent {
    fn drop(&mut self) {
        self.stop();
    }
}

impl AgentInner {
    fn primary(&self) -> Result<Identity, AgentError> {
        self.wallet
            .lock()
            .expect("wallet lock")
            .primary()
            .cloned()
            .ok_or(AgentError::NoIdentity)
    }

    fn create_identity(&self) -> Result<IdentitySummary, AgentError> {
        let scheme = if self.tls_context.is_some() { "https" } else { "http" };
        let endpoint = format!("{scheme}://127.0.0.1:{}/didcomm", self.local_addr.port());
        let identity = didnet_core::generate(&self.did_method, &endpoint)
            .map_err(|e| AgentError::Startup(e.to_string()))?;
        self.vdr
            .register(&identity.document, &identity.document_proof())
            .map_err(|e| AgentError::Startup(e.to_string()))?;
        let summary = IdentitySummary {
            did: identity.did.to_string(),
            key_ids: vec![identity.signing.key_id.clone(), identity.agreement.key_id.clone()],
            endpoint: identity.document.endpoint_uri().map(str::to_owned),
        };
        self.wallet.lock().expect("wallet lock").add_identity(identity);
        Ok(summary)
    }

    fn send(
        self: &Arc<AgentInner>,
        destination: &Did,
        message_type: &str,
        body: &[u8],
    ) -> Result<DeliveryReceipt, AgentError> {
        let result = match self.protocol {
            Protocol::V1 => self.send_v1(destination, message_type, body),
            Protocol::V2 => self.send_v2(destination, message_type, body),
            Protocol::Tls => self.send_tls(destination, message_type, body),
        };
        let receipt = result.map_err(|e| match e {
            AgentError::Envelope(EnvelopeError::Resolution(
                didnet_core::ResolveError::NotFound(what),
            ))
            | AgentError::Resolution(didnet_core::ResolveError::NotFound(what)) => {
                AgentError::NotFound(what)
            }
            other => other,
        })?;
        debug_assert!(receipt.phases.is_monotone(), "phase ordering violated");
        self.receipts
            .lock()
            .expect("receipts lock")
            .insert(receipt.receipt_id.clone(), receipt.clone());
        Ok(receipt)
    }

    fn post_envelope(
        &self,
        endpoint: &str,
        wire: &[u8],
        headers: &[(String, String)],
    ) -> Result<(InboundReport, u64), AgentError> {
        let mut t_wire_sent = 0u64;
        let (status, response_body, body_written) = http::post(
            endpoint,
            "application/octet-stream",
            headers,
            wire,
            || t_wire_sent = now_nanos(),
        )
        .map_err(|e| AgentError::Delivery {
            phase: "transport",
            detail: e.to_string(),
        })?;
        if status != 202 {
            let detail = String::from_utf8_lossy(&response_body).into_owned();
            return Err(AgentError::Delivery {
                phase: "remote-processing",
                detail: format!("status {status}: {detail}"),
            });
        }
        // The instrumented transport must have written exactly the
        // envelope; anything else is a framing bug.
        if body_written != wire.len() as u64 {
            return Err(AgentError::Delivery {
                phase: "transport",
                detail: format!(
                    "wrote {body_written} body bytes for a {}-byte envelope",
                    wire.len()
                ),
            });
        }
        let report: InboundReport = serde_json::from_slice(&response_body).map_err(|e| {
            AgentError::Delivery {
                phase: "remote-report",
                detail: e.to_string(),
            }
        })?;
        Ok((report, t_wire_sent))
    }

    fn send_v2(
        self: &Arc<AgentInner>,
        destination: &Did,
        message_type: &str,
        body: &[u8],
    ) -> Result<DeliveryReceipt, AgentError> {
        let me = self.primary()?;
        let t_submit = now_nanos();
        let metrics_before = self.resolver.snapshot_metrics();
        let t_encap_start = now_nanos();
        let packed = v2::pack_v2(
            &me,
            destination,
            message_type,
            body,
            unix_now(),
            &self.resolver,
            &mut rand::rngs::OsRng,
        )?;
        let t_encap_end = now_nanos();
        let metrics_after = self.resolver.snapshot_metrics();

        let endpoint = packed
            .recipient_endpoint
            .clone()
            .ok_or_else(|| AgentError::NotFound(format!("{destination} has no endpoint")))?;
        let wire = packed.envelope.to_wire();
        let (report, t_wire_sent) = self.post_envelope(&endpoint, &wire, &[])?;

        Ok(DeliveryReceipt {
            receipt_id: packed.jwm_id,
            destination: destination.to_string(),
            message_type: message_type.to_owned(),
            protocol: "v2".into(),
            wire_bytes: wire.len() as u64,
            handshake_bytes: 0,
            phases: PhaseTimestamps {
                t_submit,
                t_encap_start,
                t_encap_end,
                t_wire_sent,
                t_wire_received: report.t_wire_received,
                t_decap_start: report.t_decap_start,
                t_decap_end: report.t_decap_end,
                t_delivered: report.t_delivered,
            },
            encap_resolve_nanos: (metrics_after.total_resolve_time
                - metrics_before.total_resolve_time)
                .as_nanos() as u64,
            decap_resolve_nanos: report.decap_resolve_nanos,
            encap_ledger_reads: metrics_after.ledger_reads - metrics_before.ledger_reads,
            decap_ledger_reads: report.decap_ledger_reads,
        })
    }

    fn send_v1(
        self: &Arc<AgentInner>,
        destination: &Did,
        message_type: &str,
        body: &[u8],
    ) -> Result<DeliveryReceipt, AgentError> {
        let me = self.primary()?;
        let t_submit = now_nanos();
        let (record, handshake_bytes) = self.ensure_v1_connection(&me, destination)?;

        let t_encap_start = now_nanos();
        let envelope = v1::pack_v1(&me, &record, body, &mut rand::rngs::OsRng)?;
        let t_encap_end = now_nanos();

        let endpoint = record
            .their_document
            .as_ref()
            .and_then(|d| d.endpoint_uri())
            .ok_or_else(|| AgentError::NotFound(format!("{destination} has no endpoint")))?
            .to_owned();
        let wire = envelope.to_wire();
        let (report, t_wire_sent) = self.post_envelope(&endpoint, &wire, &[])?;

        Ok(DeliveryReceipt {
            receipt_id: fresh_id(),
            destination: destination.to_string(),
            message_type: message_type.to_owned(),
            protocol: "v1".into(),
            wire_bytes: wire.len() as u64,
            handshake_bytes,
            phases: PhaseTimestamps {
                t_submit,
                t_encap_start,
                t_encap_end,
                t_wire_sent,
                t_wire_received: report.t_wire_received,
                t_decap_start: report.t_decap_start,
                t_decap_end: report.t_decap_end,
                t_delivered: report.t_delivered,
            },
            encap_resolve_nanos: 0,
            decap_resolve_nanos: report.decap_resolve_nanos,
            encap_ledger_reads: 0,
            decap_ledger_reads: report.decap_ledger_reads,
        })
    }

    /// Returns a complete connection with the peer, running the exchange
    /// on first use. The second value is the byte cost of the exchange
    /// paid by this call (zero when the connection already existed).
    fn ensure_v1_connection(
        self: &Arc<AgentInner>,
        me: &Identity,
        destination: &Did,
    ) -> Result<(ConnectionRecord, u64), AgentError> {
        {
            let wallet = self.wallet.lock().expect("wallet lock");
            if let Some(record) = wallet.connection_with_peer(destination) {
                return Ok((record.clone(), 0));
            }
        }

        // The one ledger touch of the stateful protocol: the peer's
        // endpoint for the invitation. Documents themselves travel inline
        // during the exchange.
        let peer_doc = self.resolver.resolve(destination)?;
        let endpoint = peer_doc
            .endpoint_uri()
            .ok_or_else(|| AgentError::NotFound(format!("{destination} has no endpoint")))?
            .to_owned();

        let (record, invitation) = v1::create_invitation(me, &mut rand::rngs::OsRng);
        let connection_id = record.connection_id.clone();
        let invitation_wire = invitation.to_wire();
        {
            let mut pending = self.pending_exchanges.lock().expect("pending lock");
            pending.insert(
                connection_id.clone(),
                PendingExchange {
                    record,
                    peer: Some(destination.clone()),
                    bytes: invitation_wire.len() as u64,
                },
            );
        }

        let (status, response_body, _) = http::post(
            &endpoint,
            "application/octet-stream",
            &[],
            &invitation_wire,
            || {},
        )
        .map_err(|e| AgentError::Delivery {
            phase: "did-exchange",
            detail: e.to_string(),
        })?;
        if status != 200 {
            return Err(AgentError::Delivery {
                phase: "did-exchange",
                detail: format!(
                    "invitation rejected with {status}: {}",
                    String::from_utf8_lossy(&response_body)
                ),
            });
        }

        // The exchange completes through inbound handlers; wait for the
        // connection to land in the wallet.
        let deadline = Instant::now() + EXCHANGE_TIMEOUT;
        let mut wallet = self.wallet.lock().expect("wallet lock");
        loop {
            if let Some(record) = wallet.connection_with_peer(destination) {
                let record = record.clone();
                drop(wallet);
                let bytes = self
                    .finished_exchange_bytes
                    .lock()
                    .expect("exchange bytes lock")
                    .remove(&destination.to_string())
                    .unwrap_or(0);
                return Ok((record, bytes));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(AgentError::Delivery {
                    phase: "did-exchange",
                    detail: format!("exchange with {destination} timed out"),
                });
            }
            let (guard, _timeout) = self
                .connections_changed
                .wait_timeout(wallet, deadline - now)
                .expect("wallet lock");
            wallet = guard;
        }
    }

    fn send_tls(
        self: &Arc<AgentInner>,
        destination: &Did,
        message_type: &str,
        body: &[u8],
    ) -> Result<DeliveryReceipt, AgentError> {
        let me = self.primary()?;
        let t_submit = now_nanos();
        let (session, first_use) = self.ensure_tls_session(destination)?;
        let handshake_bytes = first_use.map(|i| i.handshake_bytes).unwrap_or(0);

        // The baseline has no envelope: encapsulation is just request
        // framing; record-layer crypto happens inside the stream write.
        let t_encap_start = now_nanos();
        let headers = vec![
            ("x-didnet-sender".to_owned(), me.did.to_string()),
            ("x-didnet-type".to_owned(), message_type.to_owned()),
        ];
        let t_encap_end = now_nanos();

        let mut session = session.lock().expect("tls session lock");
        let authority = session.authority.clone();
        let mut t_wire_sent = 0u64;
        let counters_result = session.stream.round_trip(
            "POST",
            "/didcomm",
            &authority,
            "application/octet-stream",
            &headers,
            body,
            || t_wire_sent = now_nanos(),
        );
        let (status, response_body) = counters_result.map_err(|e| AgentError::Delivery {
            phase: "transport",
            detail: e.to_string(),
        })?;
        drop(session);
        if status != 202 {
            return Err(AgentError::Delivery {
                phase: "remote-processing",
                detail: format!(
                    "status {status}: {}",
                    String::from_utf8_lossy(&response_body)
                ),
            });
        }
        let report: InboundReport =
            serde_json::from_slice(&response_body).map_err(|e| AgentError::Delivery {
                phase: "remote-report",
                detail: e.to_string(),
            })?;

        Ok(DeliveryReceipt {
            receipt_id: fresh_id(),
            destination: destination.to_string(),
            message_type: message_type.to_owned(),
            protocol: "tls".into(),
            wire_bytes: body.len() as u64,
            handshake_bytes,
            phases: PhaseTimestamps {
                t_submit,
                t_encap_start,
                t_encap_end,
                t_wire_sent,
                t_wire_received: report.t_wire_received,
                t_decap_start: report.t_decap_start,
                t_decap_end: report.t_decap_end,
                t_delivered: report.t_delivered,
            },
            encap_resolve_nanos: 0,
            decap_resolve_nanos: report.decap_resolve_nanos,
            encap_ledger_reads: 0,
            decap_ledger_reads: report.decap_ledger_reads,
        })
    }

    fn ensure_tls_session(
        &self,
        destination: &Did,
    ) -> Result<(Arc<Mutex<TlsSession>>, Option<TlsSessionInfo>), AgentError> {
        let key = destination.to_string();
        {
            let sessions = self.tls_sessions.lock().expect("tls sessions lock");
            if let Some(session) = sessions.get(&key) {
                return Ok((session.clone(), None));
            }
        }
        let context = self
            .tls_context
            .as_ref()
            .ok_or_else(|| AgentError::Startup("agent is not in tls mode".into()))?;
        let authority = self
            .peer_addresses
            .lock()
            .expect("peer lock")
            .get(&key)
            .cloned()
            .ok_or_else(|| AgentError::NotFound(format!("no address for {destination}")))?;

        let start = Instant::now();
        let tcp = TcpStream::connect(&authority).map_err(|e| AgentError::Delivery {
            phase: "tls-connect",
            detail: e.to_string(),
        })?;
        tcp.set_nodelay(true).ok();
        tcp.set_read_timeout(Some(http::READ_TIMEOUT)).ok();
        let counters = Arc::new(ByteCounters::default());
        let mut counting = CountingStream::new(tcp, counters.clone());
        let server_name = rustls::pki_types::ServerName::try_from("127.0.0.1")
            .expect("loopback server name");
        let mut conn = rustls::ClientConnection::new(context.client.clone(), server_name)
            .map_err(|e| AgentError::Delivery {
                phase: "tls-handshake",
                detail: e.to_string(),
            })?;
        while conn.is_handshaking() {
            conn.complete_io(&mut counting)
                .map_err(|e| AgentError::Delivery {
                    phase: "tls-handshake",
                    detail: e.to_string(),
                })?;
        }
        let info = TlsSessionInfo {
            handshake_bytes: counters.read.load(Ordering::Relaxed)
                + counters.written.load(Ordering::Relaxed),
            handshake_nanos: start.elapsed().as_nanos() as u64,
            reused: false,
        };
        let session = Arc::new(Mutex::new(TlsSession {
            stream: StreamBuf::new(rustls::StreamOwned::new(conn, counting)),
            authority,
            info,
        }));
        self.tls_sessions
            .lock()
            .expect("tls sessions lock")
            .insert(key, session.clone());
        Ok((session, Some(info)))
    }

    /// Hands a message to the business logic. Returns the delivery
    /// timestamp; a handler-provided reply is sent asynchronously.
    fn deliver(self: &Arc<AgentInner>, message: InboundMessage) -> u64 {
        self.delivered
            .lock()
            .expect("delivered lock")
            .push(message.clone());
        self.delivered_count.fetch_add(1, Ordering::Relaxed);
        let t_delivered = now_nanos();

        let handler = self.handler.read().expect("handler lock").clone();
        if let Some(handler) = handler {
            if let Some(reply) = handler(&message) {
                if let Some(sender) = message.sender.clone() {
                    let agent = self.clone();
                    let reply_type = message
                        .message_type
                        .clone()
                        .unwrap_or_else(|| "reply".to_owned());
                    std::thread::spawn(move || {
                        let _ = AgentInner::send(&agent, &sender, &reply_type, &reply);
                    });
                }
            }
        }
        t_delivered
    }
}

fn json_response<T: Serialize>(status: u16, value: &T) -> Response {
    Response {
        status,
        content_type: "application/json".into(),
        body: serde_json::to_vec(value).expect("serializable"),
    }
}

fn dispatch(inner: &Arc<AgentInner>, request: Request) -> Response {
    match (request.method.as_str(), request.path.as_str()) {
        ("POST", "/didcomm") => handle_didcomm(inner, &request),
        ("GET", "/health") => handle_health(inner),
        ("POST", "/internal/send") => handle_internal_send(inner, &request),
        ("GET", "/internal/wallet/identities") => {
            json_response(200, &inner.wallet.lock().expect("wallet lock").identity_summaries())
        }
        ("POST", "/internal/wallet/identities") => match inner.create_identity() {
            Ok(summary) => json_response(200, &summary),
            Err(e) => Response::error(409, &e.to_string()),
        },
        ("GET", "/internal/wallet/connections") => {
            let wallet = inner.wallet.lock().expect("wallet lock");
            let records: Vec<&ConnectionRecord> = wallet.connections();
            json_response(200, &records)
        }
        ("GET", "/internal/wallet/credentials") => {
            let wallet = inner.wallet.lock().expect("wallet lock");
            json_response(200, &wallet.credentials().to_vec())
        }
        ("POST", "/internal/wallet/credentials") => {
            match serde_json::from_slice::<VerifiableCredential>(&request.body) {
                Ok(credential) => {
                    inner
                        .wallet
                        .lock()
                        .expect("wallet lock")
                        .store_credential(credential);
                    json_response(200, &serde_json::json!({ "stored": true }))
                }
                Err(e) => Response::error(400, &format!("credential does not parse: {e}")),
            }
        }
        ("GET", "/internal/stats") => json_response(
            200,
            &AgentStats {
                delivered: inner.delivered_count.load(Ordering::Relaxed),
                integrity_failures: inner.integrity_failures.load(Ordering::Relaxed),
                format_rejections: inner.format_rejections.load(Ordering::Relaxed),
            },
        ),
        ("GET", path) if path.starts_with("/internal/receipts/") => {
            let id = &path["/internal/receipts/".len()..];
            match inner.receipts.lock().expect("receipts lock").get(id) {
                Some(receipt) => json_response(200, receipt),
                None => Response::error(404, "no such receipt"),
            }
        }
        _ => Response::error(404, "no such endpoint"),
    }
}

fn handle_health(inner: &Arc<AgentInner>) -> Response {
    let did = inner
        .wallet
        .lock()
        .expect("wallet lock")
        .primary()
        .map(|i| i.did.to_string());
    json_response(
        200,
        &serde_json::json!({
            "nf_name": inner.nf_name,
            "protocol": inner.protocol.as_str(),
            "did": did,
        }),
    )
}

#[derive(Deserialize)]
struct InternalSendRequest {
    destination: String,
    message_type: String,
    body_b64: String,
}

fn handle_internal_send(inner: &Arc<AgentInner>, request: &Request) -> Response {
    let parsed: InternalSendRequest = match serde_json::from_slice(&request.body) {
        Ok(p) => p,
        Err(e) => return Response::error(400, &format!("send request does not parse: {e}")),
    };
    let destination: Did = match parsed.destination.parse() {
        Ok(did) => did,
        Err(e) => return Response::error(400, &format!("destination: {e}")),
    };
    let body = match didnet_core::encoding::b64url_decode(&parsed.body_b64) {
        Ok(b) => b,
        Err(_) => return Response::error(400, "body_b64 is not base64url"),
    };
    match AgentInner::send(inner, &destination, &parsed.message_type, &body) {
        Ok(receipt) => json_response(200, &receipt),
        Err(AgentError::NotFound(what)) => Response::error(404, &what),
        Err(e) => Response::error(502, &e.to_string()),
    }
}

fn handle_didcomm(inner: &Arc<AgentInner>, request: &Request) -> Response {
    let t_wire_received = now_nanos();
    let body = &request.body;
    match inner.protocol {
        Protocol::Tls => handle_inbound_tls(inner, request, t_wire_received),
        Protocol::V1 => {
            if body.len() >= 4 && &body[..4] == MAGIC_V1_EXCHANGE {
                handle_inbound_exchange(inner, body)
            } else if body.len() >= 4 && &body[..4] == MAGIC_V1_ENVELOPE {
                handle_inbound_v1(inner, body, t_wire_received)
            } else {
                inner.format_rejections.fetch_add(1, Ordering::Relaxed);
                Response::error(400, "not a v1 artifact")
            }
        }
        Protocol::V2 => {
            if body.len() >= 4 && &body[..4] == MAGIC_V2_ENVELOPE {
                handle_inbound_v2(inner, body, t_wire_received)
            } else {
                inner.format_rejections.fetch_add(1, Ordering::Relaxed);
                Response::error(400, "not a v2 envelope")
            }
        }
    }
}

fn envelope_error_response(inner: &Arc<AgentInner>, error: &EnvelopeError) -> Response {
    inner.integrity_failures.fetch_add(1, Ordering::Relaxed);
    let status = match error {
        EnvelopeError::Unauthorized(_) => 401,
        EnvelopeError::ProtocolState(_) => 409,
        _ => 400,
    };
    Response::error(status, &error.to_string())
}

fn accepted(report: InboundReport) -> Response {
    Response {
        status: 202,
        content_type: "application/json".into(),
        body: serde_json::to_vec(&report).expect("report serializes"),
    }
}

fn handle_inbound_tls(
    inner: &Arc<AgentInner>,
    request: &Request,
    t_wire_received: u64,
) -> Response {
    let t_decap_start = now_nanos();
    let sender = request
        .header("x-didnet-sender")
        .and_then(|s| s.parse::<Did>().ok());
    let message_type = request.header("x-didnet-type").map(str::to_owned);
    let body = request.body.clone();
    let t_decap_end = now_nanos();
    let t_delivered = inner.deliver(InboundMessage {
        sender,
        message_type,
        body,
        received_at: t_wire_received,
    });
    accepted(InboundReport {
        t_wire_received,
        t_decap_start,
        t_decap_end,
        t_delivered,
        decap_resolve_nanos: 0,
        decap_ledger_reads: 0,
    })
}

fn handle_inbound_v2(inner: &Arc<AgentInner>, body: &[u8], t_wire_received: u64) -> Response {
    let me = match inner.primary() {
        Ok(me) => me,
        Err(e) => return Response::error(500, &e.to_string()),
    };
    let metrics_before = inner.resolver.snapshot_metrics();
    let t_decap_start = now_nanos();
    let result = EnvelopeV2::from_wire(body).and_then(|env| v2::unpack_v2(&me, &env, &inner.resolver));
    let t_decap_end = now_nanos();
    let metrics_after = inner.resolver.snapshot_metrics();
    match result {
        Ok(jwm) => {
            let t_delivered = inner.deliver(InboundMessage {
                sender: Some(jwm.from),
                message_type: Some(jwm.message_type),
                body: jwm.body,
                received_at: t_wire_received,
            });
            accepted(InboundReport {
                t_wire_received,
                t_decap_start,
                t_decap_end,
                t_delivered,
                decap_resolve_nanos: (metrics_after.total_resolve_time
                    - metrics_before.total_resolve_time)
                    .as_nanos() as u64,
                decap_ledger_reads: metrics_after.ledger_reads - metrics_before.ledger_reads,
            })
        }
        Err(e) => envelope_error_response(inner, &e),
    }
}

fn handle_inbound_v1(inner: &Arc<AgentInner>, body: &[u8], t_wire_received: u64) -> Response {
    let me = match inner.primary() {
        Ok(me) => me,
        Err(e) => return Response::error(500, &e.to_string()),
    };
    let t_decap_start = now_nanos();
    let result = (|| -> Result<(Vec<u8>, ConnectionRecord), EnvelopeError> {
        let envelope = EnvelopeV1::from_wire(body)?;
        let sender_key = v1::peek_sender_v1(&me, &envelope)?;
        let record = inner
            .wallet
            .lock()
            .expect("wallet lock")
            .connection_with_peer_key(&sender_key)
            .cloned()
            .ok_or_else(|| {
                EnvelopeError::Unauthorized(format!(
                    "no complete connection with sender key {sender_key}"
                ))
            })?;
        let payload = v1::unpack_v1(&me, &record, &envelope)?;
        Ok((payload, record))
    })();
    let t_decap_end = now_nanos();
    match result {
        Ok((payload, record)) => {
            let t_delivered = inner.deliver(InboundMessage {
                sender: record.their_did.clone(),
                // The stateful envelope carries no message headers; the
                // business logic receives the body alone.
                message_type: None,
                body: payload,
                received_at: t_wire_received,
            });
            accepted(InboundReport {
                t_wire_received,
                t_decap_start,
                t_decap_end,
                t_delivered,
                decap_resolve_nanos: 0,
                decap_ledger_reads: 0,
            })
        }
        Err(e) => envelope_error_response(inner, &e),
    }
}

fn handle_inbound_exchange(inner: &Arc<AgentInner>, body: &[u8]) -> Response {
    let message = match ExchangeMessage::from_wire(body) {
        Ok(m) => m,
        Err(e) => {
            inner.format_rejections.fetch_add(1, Ordering::Relaxed);
            return Response::error(400, &e.to_string());
        }
    };
    let received_len = body.len() as u64;
    match exchange_step(inner, message, received_len) {
        Ok(()) => json_response(200, &serde_json::json!({ "ok": true })),
        Err(e) => {
            let status = match &e {
                EnvelopeError::ProtocolState(_) => 409,
                EnvelopeError::Unauthorized(_) => 401,
                _ => 400,
            };
            Response::error(status, &e.to_string())
        }
    }
}

/// Advances the exchange state machine for one inbound message and fires
/// the follow-up message, if any. Locks are never held across the
/// follow-up post.
fn exchange_step(
    inner: &Arc<AgentInner>,
    message: ExchangeMessage,
    received_len: u64,
) -> Result<(), EnvelopeError> {
    let me = inner
        .primary()
        .map_err(|e| EnvelopeError::ProtocolState(e.to_string()))?;
    match message {
        invitation @ ExchangeMessage::Invitation { .. } => {
            let ExchangeMessage::Invitation { endpoint, .. } = &invitation else {
                unreachable!()
            };
            let endpoint = endpoint.clone();
            let (record, request) = v1::process_invitation(&me, &invitation)?;
            inner.pending_exchanges.lock().expect("pending lock").insert(
                record.connection_id.clone(),
                PendingExchange {
                    record,
                    peer: None,
                    bytes: 0,
                },
            );
            post_exchange(&endpoint, &request)
        }
        request @ ExchangeMessage::Request { .. } => {
            let ExchangeMessage::Request {
                connection_id,
                sender_document,
                ..
            } = &request
            else {
                unreachable!()
            };
            let endpoint = sender_document
                .endpoint_uri()
                .ok_or_else(|| {
                    EnvelopeError::Malformed("request document has no endpoint".into())
                })?
                .to_owned();
            let response = {
                let mut pending = inner.pending_exchanges.lock().expect("pending lock");
                let entry = pending.get_mut(connection_id).ok_or_else(|| {
                    EnvelopeError::ProtocolState(format!(
                        "no pending exchange for connection {connection_id}"
                    ))
                })?;
                entry.bytes += received_len;
                let response = v1::process_request(&me, &mut entry.record, &request)?;
                entry.bytes += response.to_wire().len() as u64;
                response
            };
            post_exchange(&endpoint, &response)
        }
        response @ ExchangeMessage::Response { .. } => {
            let ExchangeMessage::Response {
                connection_id,
                sender_document,
                ..
            } = &response
            else {
                unreachable!()
            };
            let endpoint = sender_document
                .endpoint_uri()
                .ok_or_else(|| {
                    EnvelopeError::Malformed("response document has no endpoint".into())
                })?
                .to_owned();
            let complete = {
                let mut pending = inner.pending_exchanges.lock().expect("pending lock");
                let mut entry = pending.remove(connection_id).ok_or_else(|| {
                    EnvelopeError::ProtocolState(format!(
                        "no pending exchange for connection {connection_id}"
                    ))
                })?;
                let complete = match v1::process_response(&mut entry.record, &response) {
                    Ok(c) => c,
                    Err(e) => {
                        pending.insert(connection_id.clone(), entry);
                        return Err(e);
                    }
                };
                let mut wallet = inner.wallet.lock().expect("wallet lock");
                wallet.insert_connection(entry.record);
                inner.connections_changed.notify_all();
                complete
            };
            post_exchange(&endpoint, &complete)
        }
        complete @ ExchangeMessage::Complete { .. } => {
            let ExchangeMessage::Complete { connection_id, .. } = &complete else {
                unreachable!()
            };
            let mut pending = inner.pending_exchanges.lock().expect("pending lock");
            let mut entry = pending.remove(connection_id).ok_or_else(|| {
                EnvelopeError::ProtocolState(format!(
                    "no pending exchange for connection {connection_id}"
                ))
            })?;
            if let Err(e) = v1::process_complete(&mut entry.record, &complete) {
                pending.insert(connection_id.clone(), entry);
                return Err(e);
            }
            entry.bytes += received_len;
            if let Some(peer) = &entry.peer {
                inner
                    .finished_exchange_bytes
                    .lock()
                    .expect("exchange bytes lock")
                    .insert(peer.to_string(), entry.bytes);
            }
            let mut wallet = inner.wallet.lock().expect("wallet lock");
            wallet.insert_connection(entry.record);
            inner.connections_changed.notify_all();
            Ok(())
        }
    }
}

fn post_exchange(endpoint: &str, message: &ExchangeMessage) -> Result<(), EnvelopeError> {
    let wire = message.to_wire();
    let (status, body, _) = http::post(endpoint, "application/octet-stream", &[], &wire, || {})
        .map_err(|e| EnvelopeError::ProtocolState(format!("exchange transport: {e}")))?;
    if status != 200 {
        return Err(EnvelopeError::ProtocolState(format!(
            "exchange step rejected with {status}: {}",
            String::from_utf8_lossy(&body)
        )));
    }
    Ok(())
}
