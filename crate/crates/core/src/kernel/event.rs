use serde::{Deserialize, Serialize};

use super::Timestamp;

/// One entry of the append-only event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub occurred_at: Timestamp,
    pub kind: String,
    pub payload: serde_json::Value,
}
