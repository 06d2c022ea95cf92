use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::billing::{Ledger, SettleOutcome};
use crate::econometrics::{EnforcementCost, SearchCost, TraceStore, TransactionTrace};
use crate::kernel::{AccountId, CommissionBps, EventRecord, ListingId, SessionId, Timestamp};
use crate::matching::{Catalog, MatchIndex};
use crate::persistence::Replay;
use crate::registry::{Registry, ServiceLevel, ServiceListing};
use crate::reputation::{Reputation, StarTally};
use crate::session::{SessionChange, SessionEngine, SessionState, StateChange};

use super::event::{Event, Progress};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct SearchActivity {
    queries: u32,
    first_at: Timestamp,
}

/// Everything the platform knows, rebuilt exactly by folding events.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    registry: Registry,
    index: MatchIndex,
    sessions: SessionEngine,
    ledger: Ledger,
    reputation: Reputation,
    traces: TraceStore,
    /// sha256(token) to account.
    tokens: BTreeMap<String, AccountId>,
    /// Searches since the buyer's last request.
    search_activity: BTreeMap<AccountId, SearchActivity>,
    /// Search cost captured at request time, waiting for settlement.
    search_costs: BTreeMap<SessionId, SearchCost>,
}

impl State {
    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn index(&self) -> &MatchIndex {
        &self.index
    }

    pub fn sessions(&self) -> &SessionEngine {
        &self.sessions
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn reputation(&self) -> &Reputation {
        &self.reputation
    }

    pub fn traces(&self) -> &TraceStore {
        &self.traces
    }

    pub fn account_for_token_hash(&self, hash: &str) -> Option<&AccountId> {
        self.tokens.get(hash)
    }

    /// Hex sha256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("state serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Session count per state name.
    pub fn census(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for s in self.sessions.sessions() {
            *out.entry(s.state.name()).or_insert(0) += 1;
        }
        out
    }

    /// Checks every money invariant the ledger must keep.
    pub fn check_conservation(&self) -> Result<(), String> {
        if self.ledger.net_drift() != 0 {
            return Err(format!("ledger drift {}", self.ledger.net_drift()));
        }
        let mut per_settlement: BTreeMap<_, i64> = BTreeMap::new();
        for e in self.ledger.entries() {
            *per_settlement.entry(&e.settlement_id).or_default() += e.delta;
        }
        if let Some((id, sum)) = per_settlement.iter().find(|(_, s)| **s != 0) {
            return Err(format!("settlement {id} sums to {sum}"));
        }
        for r in self.ledger.receipts() {
            if r.charge != r.commission + r.seller_credit {
                return Err(format!("receipt {} does not split its charge", r.settlement_id));
            }
        }
        for s in self.sessions.sessions() {
            let settled = s.state == SessionState::Settled;
            if settled != self.ledger.receipt(&s.session_id).is_some() {
                return Err(format!("session {} settled without a single receipt", s.session_id));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &Event, at: Timestamp) -> Vec<StateChange> {
        match event {
            Event::AccountRegistered {
                account,
                token_hash,
                endowment,
            } => {
                self.ledger.open_account(&account.account_id, *endowment);
                self.tokens.insert(token_hash.clone(), account.account_id.clone());
                self.registry.insert_account(account.clone());
                Vec::new()
            }
            Event::ListingCreated { listing } => {
                self.index.index_listing(listing);
                self.registry.insert_listing(listing.clone());
                Vec::new()
            }
            Event::ListingDeactivated { listing_id } => {
                if self.registry.set_active(listing_id, false).is_ok() {
                    self.index.remove(listing_id);
                }
                Vec::new()
            }
            Event::AvailabilitySet { listing_id, windows } => {
                self.registry.replace_windows(listing_id, windows.clone());
                Vec::new()
            }
            Event::SearchPerformed { account_id, .. } => {
                self.search_activity
                    .entry(account_id.clone())
                    .and_modify(|a| a.queries += 1)
                    .or_insert(SearchActivity {
                        queries: 1,
                        first_at: at,
                    });
                Vec::new()
            }
            Event::SessionRequested { session, hold } => {
                self.start_trace(&session.buyer_id, &session.session_id, at);
                self.ledger.insert_hold(hold.clone());
                self.sessions.apply(&SessionChange::Opened {
                    session: session.clone(),
                });
                Vec::new()
            }
            Event::AppointmentBooked {
                appointment,
                session,
                hold,
            } => {
                self.start_trace(&session.buyer_id, &session.session_id, at);
                self.ledger.insert_hold(hold.clone());
                self.sessions.apply(&SessionChange::Booked {
                    appointment: appointment.clone(),
                    session: session.clone(),
                });
                Vec::new()
            }
            Event::SessionResponded(p)
            | Event::AppointmentCanceled(p)
            | Event::PartyJoined(p)
            | Event::HeartbeatAcked(p)
            | Event::SessionEnded(p)
            | Event::TimeoutsFired(p) => self.progress(p, at),
            Event::RatingPosted { rating } => {
                if let Some(mut trace) = self.traces.get(&rating.session_id).cloned() {
                    trace.enforcement_cost.rating_posted = true;
                    let _ = self.traces.record(trace);
                }
                self.reputation.insert(rating.clone());
                Vec::new()
            }
            Event::TraceRecorded { trace } => {
                let _ = self.traces.record(trace.clone());
                Vec::new()
            }
        }
    }

    fn start_trace(&mut self, buyer: &AccountId, session: &SessionId, at: Timestamp) {
        let cost = match self.search_activity.remove(buyer) {
            Some(a) => SearchCost {
                query_count: a.queries,
                time_to_select: at.secs_since(a.first_at),
            },
            None => SearchCost::default(),
        };
        self.search_costs.insert(session.clone(), cost);
    }

    fn progress(&mut self, p: &Progress, at: Timestamp) -> Vec<StateChange> {
        let mut out = Vec::new();
        for change in &p.changes {
            let Some(sc) = self.sessions.apply(change) else {
                continue;
            };
            let id = sc.session_id.clone();
            let to = sc.to;
            out.push(sc);
            match to {
                SessionState::Ended => out.extend(self.settle(&id, p.commission_bps, at)),
                SessionState::Rejected | SessionState::Expired | SessionState::Canceled => {
                    self.ledger.release_hold(&id);
                    self.search_costs.remove(&id);
                }
                _ => {}
            }
        }
        out
    }

    /// Ended sessions settle within the same event that ends them.
    fn settle(&mut self, id: &SessionId, bps: CommissionBps, at: Timestamp) -> Option<StateChange> {
        let session = self.sessions.session(id)?.clone();
        match self.ledger.prepare_settlement(&session, bps, at) {
            Ok(SettleOutcome::New(settlement)) => self.ledger.apply_settlement(&settlement),
            Ok(SettleOutcome::Existing(_)) => {}
            Err(e) => debug_assert!(false, "ended session could not settle: {e}"),
        }
        let search_cost = self.search_costs.remove(id).unwrap_or_default();
        let _ = self.traces.record(TransactionTrace {
            session_id: id.clone(),
            search_cost,
            bargaining_cost: Default::default(),
            enforcement_cost: EnforcementCost {
                escrow_used: true,
                rating_posted: self.reputation.rating(id).is_some(),
            },
        });
        self.sessions.apply(&SessionChange::Settled {
            session_id: id.clone(),
            at,
        })
    }
}

impl Catalog for State {
    fn listing(&self, id: &ListingId) -> Option<&ServiceListing> {
        self.registry.listing(id)
    }

    fn level_at(&self, id: &ListingId, t: Timestamp) -> Option<ServiceLevel> {
        self.registry.level_at(id, t).ok().flatten()
    }

    fn seller_tally(&self, seller: &AccountId) -> StarTally {
        self.reputation.tally(seller)
    }
}

impl Replay for State {
    fn apply_record(&mut self, record: &EventRecord) -> Result<(), String> {
        let event = Event::decode(record)?;
        self.apply(&event, record.occurred_at);
        Ok(())
    }
}
