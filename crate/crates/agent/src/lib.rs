//! Per-NF communication agent.
//!
//! An [`Agent`] owns a wallet (identities, connections, credentials), a
//! resolver with its own cache policy, and an HTTP endpoint accepting
//! envelopes at `POST /didcomm`. Internal endpoints under `/internal/`
//! expose send, wallet, and receipt operations to the NF business logic.
//! Agents run one of three transports: the stateful envelope protocol,
//! the stateless one, or mutually authenticated TLS as the baseline.

mod agent;
pub mod http;
pub mod receipt;
pub mod tls;
pub mod wallet;

pub use agent::{
    Agent, AgentConfig, AgentError, AgentStats, InboundMessage, MessageHandler, Protocol,
    TlsSessionInfo, TlsSetup,
};
pub use receipt::{now_nanos, DeliveryReceipt, InboundReport, PhaseTimestamps};
pub use tls::{TlsContext, TlsError, TlsIdentity};
pub use wallet::{IdentitySummary, Wallet};
