//! Delivery receipts with phase-boundary timestamps.
//!
//! All timestamps are nanoseconds on one process-wide monotonic epoch, so
//! sender-side and receiver-side marks are directly comparable inside one
//! simulation process.

use std::sync::OnceLock;
use std::time::Instant;

use serde::{Deserialize, Serialize};

static EPOCH: OnceLock<Instant> = OnceLock::new();

/// Nanoseconds since the process epoch.
pub fn now_nanos() -> u64 {
    let epoch = EPOCH.get_or_init(Instant::now);
    epoch.elapsed().as_nanos() as u64
}

/// Phase boundaries of one message delivery, non-decreasing in field
/// order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTimestamps {
    pub t_submit: u64,
    pub t_encap_start: u64,
    pub t_encap_end: u64,
    pub t_wire_sent: u64,
    pub t_wire_received: u64,
    pub t_decap_start: u64,
    pub t_decap_end: u64,
    pub t_delivered: u64,
}

impl PhaseTimestamps {
    pub fn as_array(&self) -> [u64; 8] {
        [
            self.t_submit,
            self.t_encap_start,
            self.t_encap_end,
            self.t_wire_sent,
            self.t_wire_received,
            self.t_decap_start,
            self.t_decap_end,
            self.t_delivered,
        ]
    }

    pub fn is_monotone(&self) -> bool {
        self.as_array().windows(2).all(|w| w[0] <= w[1])
    }
}

/// Facts the receiving agent reports back in its acceptance response.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct InboundReport {
    pub t_wire_received: u64,
    pub t_decap_start: u64,
    pub t_decap_end: u64,
    pub t_delivered: u64,
    pub decap_resolve_nanos: u64,
    pub decap_ledger_reads: u64,
}

/// Everything the sender learns about one delivered message.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeliveryReceipt {
    pub receipt_id: String,
    pub destination: String,
    pub message_type: String,
    pub protocol: String,
    /// Exact byte length of the envelope written to the transport.
    pub wire_bytes: u64,
    /// One-time setup bytes paid by this send (connection exchange or TLS
    /// handshake); zero on every send after the first.
    pub handshake_bytes: u64,
    pub phases: PhaseTimestamps,
    pub encap_resolve_nanos: u64,
    pub decap_resolve_nanos: u64,
    pub encap_ledger_reads: u64,
    pub decap_ledger_reads: u64,
}

impl DeliveryReceipt {
    pub fn total_nanos(&self) -> u64 {
        self.phases.t_delivered.saturating_sub(self.phases.t_submit)
    }

    pub fn encap_nanos(&self) -> u64 {
        self.phases
            .t_encap_end
            .saturating_sub(self.phases.t_encap_start)
    }

    pub fn decap_nanos(&self) -> u64 {
        self.phases
            .t_decap_end
            .saturating_sub(self.phases.t_decap_start)
    }

    /// Remainder: transport, framing, scheduling, and everything not
    /// attributable to encapsulation or decapsulation.
    pub fn network_and_other_nanos(&self) -> u64 {
        self.total_nanos()
            .saturating_sub(self.encap_nanos())
            .saturating_sub(self.decap_nanos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_is_monotone() {
        let a = now_nanos();
        let b = now_nanos();
        assert!(b >= a);
    }

    #[test]
    fn phase_monotonicity_check() {
        let mut phases = PhaseTimestamps::default();
        assert!(phases.is_monotone());
        phases.t_encap_start = 5;
        phases.t_submit = 10;
        assert!(!phases.is_monotone());
    }

    #[test]
    fn phase_sum_identity() {
        let receipt = DeliveryReceipt {
            receipt_id: "r".into(),
            destination: "did:sba:x".into(),
            message_type: "t".into(),
            protocol: "v2".into(),
            wire_bytes: 10,
            handshake_bytes: 0,
            phases: PhaseTimestamps {
                t_submit: 0,
                t_encap_start: 10,
                t_encap_end: 30,
                t_wire_sent: 35,
                t_wire_received: 50,
                t_decap_start: 55,
                t_decap_end: 80,
                t_delivered: 100,
            },
            encap_resolve_nanos: 0,
            decap_resolve_nanos: 0,
            encap_ledger_reads: 0,
            decap_ledger_reads: 0,
        };
        assert_eq!(receipt.total_nanos(), 100);
        assert_eq!(receipt.encap_nanos(), 20);
        assert_eq!(receipt.decap_nanos(), 25);
        assert_eq!(
            receipt.encap_nanos() + receipt.decap_nanos() + receipt.network_and_other_nanos(),
            receipt.total_nanos()
        );
    }
}
