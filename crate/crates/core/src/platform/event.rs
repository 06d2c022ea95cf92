use serde::{Deserialize, Serialize};
use strum::IntoStaticStr;

use crate::billing::Hold;
use crate::econometrics::TransactionTrace;
use crate::kernel::{AccountId, CommissionBps, EventRecord, ListingId, Money};
use crate::registry::{Account, AvailabilityWindow, ServiceListing};
use crate::reputation::Rating;
use crate::session::{Appointment, Session, SessionChange};

/// Session changes decided by one operation, with the commission that
/// applies to any session they end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub changes: Vec<SessionChange>,
    pub commission_bps: CommissionBps,
}

/// One committed platform operation. Each maps to exactly one log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, IntoStaticStr)]
#[serde(tag = "kind", content = "payload")]
pub enum Event {
    AccountRegistered {
        account: Account,
        token_hash: String,
        endowment: Money,
    },
    ListingCreated {
        listing: ServiceListing,
    },
    ListingDeactivated {
        listing_id: ListingId,
    },
    AvailabilitySet {
        listing_id: ListingId,
        windows: Vec<AvailabilityWindow>,
    },
    SearchPerformed {
        account_id: AccountId,
        query: String,
        result_count: u32,
    },
    SessionRequested {
        session: Session,
        hold: Hold,
    },
    AppointmentBooked {
        appointment: Appointment,
        session: Session,
        hold: Hold,
    },
    SessionResponded(Progress),
    AppointmentCanceled(Progress),
    PartyJoined(Progress),
    HeartbeatAcked(Progress),
    SessionEnded(Progress),
    TimeoutsFired(Progress),
    RatingPosted {
        rating: Rating,
    },
    TraceRecorded {
        trace: TransactionTrace,
    },
}

impl Event {
    /// Splits into the record's `kind` and `payload` fields.
    pub fn encode(&self) -> (String, serde_json::Value) {
        let mut value = serde_json::to_value(self).expect("events serialize");
        let obj = value.as_object_mut().expect("adjacently tagged");
        let kind = obj
            .remove("kind")
            .and_then(|k| k.as_str().map(str::to_owned))
            .expect("kind tag");
        let payload = obj.remove("payload").unwrap_or(serde_json::Value::Null);
        (kind, payload)
    }

    pub fn decode(record: &EventRecord) -> Result<Event, String> {
        let doc = serde_json::json!({ "kind": record.kind, "payload": record.payload });
        serde_json::from_value(doc).map_err(|e| format!("undecodable {} event: {e}", record.kind))
    }

    pub fn kind(&self) -> &'static str {
        self.into()
    }
}
