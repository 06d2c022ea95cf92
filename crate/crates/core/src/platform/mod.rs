//! The platform: every operation decides against current state, appends one
//! event to the log, then applies that event. Nothing mutates state except
//! [`State::apply`], so replaying the log reproduces the live state.

mod config;
mod event;
mod state;

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::billing::{Balance, BillingError, LedgerEntry, SettlementReceipt};
use crate::econometrics::{EconError, MetricBucket, TransactionTrace};
use crate::kernel::{AccountId, Clock, ListingId, SessionId, Timestamp};
use crate::matching::{MatchError, MatchQuery, MatchResult};
use crate::persistence::{self, EventLog, PersistenceError, Snapshot, TornTail};
use crate::registry::{
    Account, AvailabilityWindow, FinancialFingerprint, NewListing, RegistryError, ServiceLevel, ServiceListing,
    WindowSpec,
};
use crate::reputation::{Rating, ReputationError, SellerSummary};
use crate::session::{Appointment, Decision, ListingContext, Session, SessionConfig, SessionError, StateChange};

pub use config::{Config, ConfigError};
pub use event::{Event, Progress};
pub use state::State;

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Billing(#[from] BillingError),
    #[error(transparent)]
    Reputation(#[from] ReputationError),
    #[error(transparent)]
    Matching(#[from] MatchError),
    #[error(transparent)]
    Econ(#[from] EconError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error("missing or unknown bearer token")]
    Unauthenticated,
    #[error("this account may not do that")]
    Forbidden,
}

/// Codes raised by the platform itself rather than a domain module.
pub const PLATFORM_CODES: &[&str] = &["Unauthenticated", "Forbidden"];

impl PlatformError {
    pub fn code(&self) -> &'static str {
        match self {
            PlatformError::Registry(e) => e.code(),
            PlatformError::Session(e) => e.code(),
            PlatformError::Billing(e) => e.code(),
            PlatformError::Reputation(e) => e.code(),
            PlatformError::Matching(e) => e.code(),
            PlatformError::Econ(e) => e.code(),
            PlatformError::Persistence(e) => e.code(),
            PlatformError::Unauthenticated => "Unauthenticated",
            PlatformError::Forbidden => "Forbidden",
        }
    }
}

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;

/// A new account and the bearer token issued for it. The token is never stored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registered {
    pub account: Account,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Review {
    pub rater_name: String,
    pub stars: u8,
    pub review: String,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListingDetail {
    pub listing: ServiceListing,
    pub windows: Vec<AvailabilityWindow>,
    pub level_now: Option<ServiceLevel>,
    pub hourly_rate: Option<crate::kernel::Money>,
    pub summary: SellerSummary,
    pub reviews: Vec<Review>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ended {
    pub session: Session,
    pub receipt: SettlementReceipt,
}

pub fn hash_token(token: &str) -> String {
    hex::encode(Sha256::digest(token.as_bytes()))
}

enum TokenSource {
    Os,
    Seeded(Box<ChaCha20Rng>),
}

impl TokenSource {
    fn next(&mut self) -> String {
        let mut bytes = [0u8; 24];
        match self {
            TokenSource::Os => rand::rngs::OsRng.fill_bytes(&mut bytes),
            TokenSource::Seeded(rng) => rng.fill_bytes(&mut bytes),
        }
        format!("bm_{}", hex::encode(bytes))
    }
}

pub struct Platform {
    config: Config,
    session_cfg: SessionConfig,
    clock: Arc<dyn Clock>,
    state: State,
    log: EventLog,
    tokens: TokenSource,
    recovered: Option<TornTail>,
    feed: Option<Vec<StateChange>>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("last_seq", &self.log.last_seq())
            .field("log", &self.log.path())
            .finish()
    }
}

impl Platform {
    /// An in-memory platform that ignores `config.log_path`.
    pub fn in_memory(config: Config, clock: Arc<dyn Clock>) -> Self {
        Self::assemble(config, clock, State::default(), EventLog::in_memory(), None)
    }

    /// Opens the configured log, restoring state from the snapshot and tail.
    /// A torn final record left by a crash is cut off.
    pub fn open(config: Config, clock: Arc<dyn Clock>) -> Result<Self> {
        let Some(path) = config.log_path.clone() else {
            return Ok(Self::in_memory(config, clock));
        };
        let (log, torn) = EventLog::open_recovering(&path)?;
        let records = log.records();
        let last = log.last_seq();
        let state = match persistence::read_snapshot::<State>(&path) {
            Ok(Some(snap)) if snap.as_of_seq <= last => persistence::restore(snap, records)?,
            _ => persistence::replay(records)?,
        };
        Ok(Self::assemble(config, clock, state, log, torn))
    }

    fn assemble(
        config: Config,
        clock: Arc<dyn Clock>,
        state: State,
        log: EventLog,
        recovered: Option<TornTail>,
    ) -> Self {
        let tokens = match config.seed {
            Some(seed) => TokenSource::Seeded(Box::new(ChaCha20Rng::seed_from_u64(seed))),
            None => TokenSource::Os,
        };
        Platform {
            session_cfg: config.session(),
            config,
            clock,
            state,
            log,
            tokens,
            recovered,
            feed: None,
        }
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn digest(&self) -> String {
        self.state.digest()
    }

    /// The torn record dropped when the log was opened, if any.
    pub fn recovered_tail(&self) -> Option<&TornTail> {
        self.recovered.as_ref()
    }

    /// Starts collecting state changes for [`Platform::drain_changes`].
    pub fn enable_change_feed(&mut self) {
        self.feed.get_or_insert_with(Vec::new);
    }

    pub fn drain_changes(&mut self) -> Vec<StateChange> {
        self.feed.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.log.flush()?)
    }

    fn commit(&mut self, event: Event, now: Timestamp) -> Result<Vec<StateChange>> {
        let (kind, payload) = event.encode();
        let seq = self.log.append(now, &kind, payload)?;
        let changes = self.state.apply(&event, now);
        if let Some(feed) = self.feed.as_mut() {
            feed.extend(changes.iter().cloned());
        }
        if seq % self.config.snapshot_every == 0 {
            if let Some(path) = self.log.path() {
                let snap = Snapshot {
                    as_of_seq: seq,
                    state: &self.state,
                };
                // the log already holds the event, so a failed snapshot loses nothing
                if let Err(e) = persistence::write_snapshot(path, &snap) {
                    eprintln!("snapshot at seq {seq} failed: {e}");
                }
            }
        }
        Ok(changes)
    }

    fn progress(&self, changes: Vec<crate::session::SessionChange>) -> Progress {
        Progress {
            changes,
            commission_bps: self.config.commission_bps,
        }
    }

    fn tick_at(&mut self, now: Timestamp) -> Result<Vec<StateChange>> {
        let due = self.state.sessions().decide_tick(&self.session_cfg, now);
        if due.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.progress(due);
        self.commit(Event::TimeoutsFired(p), now)
    }

    /// Fires every timeout due now. Idempotent for a fixed clock reading.
    pub fn tick(&mut self) -> Result<Vec<StateChange>> {
        let now = self.now();
        self.tick_at(now)
    }

    /// Reads the clock and fires due timeouts before an operation.
    fn begin(&mut self) -> Result<Timestamp> {
        let now = self.now();
        self.tick_at(now)?;
        Ok(now)
    }

    pub fn authenticate(&self, token: &str) -> Result<AccountId> {
        self.state
            .account_for_token_hash(&hash_token(token))
            .cloned()
            .ok_or(PlatformError::Unauthenticated)
    }

    pub fn register_account(&mut self, display_name: &str, fingerprint: &str) -> Result<Registered> {
        let now = self.begin()?;
        let fp = FinancialFingerprint::new(fingerprint)?;
        let account =
            self.state
                .registry()
                .prepare_account(display_name, &fp, now, self.config.max_accounts_per_fingerprint)?;
        let token = self.tokens.next();
        self.commit(
            Event::AccountRegistered {
                account: account.clone(),
                token_hash: hash_token(&token),
                endowment: self.config.endowment(),
            },
            now,
        )?;
        Ok(Registered { account, token })
    }

    pub fn create_listing(&mut self, seller: &AccountId, new: &NewListing) -> Result<ServiceListing> {
        let now = self.begin()?;
        let listing = self.state.registry().prepare_listing(seller, new, now)?;
        self.commit(
            Event::ListingCreated {
                listing: listing.clone(),
            },
            now,
        )?;
        Ok(listing)
    }

    pub fn deactivate_listing(&mut self, seller: &AccountId, id: &ListingId) -> Result<ServiceListing> {
        let now = self.begin()?;
        let listing = self.state.registry().owned_listing(seller, id)?;
        if listing.active {
            self.commit(Event::ListingDeactivated { listing_id: id.clone() }, now)?;
        }
        Ok(self.listing(id)?.clone())
    }

    pub fn set_availability(
        &mut self,
        seller: &AccountId,
        id: &ListingId,
        specs: &[WindowSpec],
    ) -> Result<Vec<AvailabilityWindow>> {
        let now = self.begin()?;
        self.state.registry().owned_listing(seller, id)?;
        let windows = self.state.registry().prepare_windows(id, specs)?;
        self.commit(
            Event::AvailabilitySet {
                listing_id: id.clone(),
                windows: windows.clone(),
            },
            now,
        )?;
        Ok(windows)
    }

    pub fn listing(&self, id: &ListingId) -> Result<&ServiceListing> {
        self.state
            .registry()
            .listing(id)
            .ok_or_else(|| RegistryError::UnknownListing(id.clone()).into())
    }

    pub fn listing_detail(&self, id: &ListingId) -> Result<ListingDetail> {
        let listing = self.listing(id)?.clone();
        let reg = self.state.registry();
        let reviews = self
            .state
            .reputation()
            .ratings_for(&listing.seller_id)
            .map(|r| Review {
                rater_name: reg
                    .account(&r.rater_id)
                    .map(|a| a.display_name.clone())
                    .unwrap_or_default(),
                stars: r.stars,
                review: r.review.clone(),
                created_at: r.created_at,
            })
            .collect();
        Ok(ListingDetail {
            windows: reg.windows(id).to_vec(),
            level_now: reg.level_at(id, self.now())?,
            hourly_rate: crate::kernel::normalized_hourly_rate(listing.rate),
            summary: self.state.reputation().summary(&listing.seller_id),
            reviews,
            listing,
        })
    }

    /// Ranked matches. Searches by a known account count toward its next
    /// transaction's search cost.
    pub fn search(&mut self, caller: Option<&AccountId>, query: &MatchQuery) -> Result<Vec<MatchResult>> {
        let now = self.begin()?;
        let results = self
            .state
            .index()
            .search(query, now, &self.state, &self.config.weights)?;
        if let Some(account) = caller.filter(|a| self.state.registry().account(a).is_some()) {
            self.commit(
                Event::SearchPerformed {
                    account_id: account.clone(),
                    query: query.text.clone(),
                    result_count: results.len() as u32,
                },
                now,
            )?;
        }
        Ok(results)
    }

    fn context(&self, id: &ListingId, at: Timestamp) -> Result<ListingContext> {
        let listing = self.listing(id)?;
        Ok(ListingContext {
            listing_id: id.clone(),
            seller_id: listing.seller_id.clone(),
            active: listing.active,
            rate: listing.rate,
            level: self.state.registry().level_at(id, at)?,
        })
    }

    fn require_account(&self, id: &AccountId) -> Result<()> {
        match self.state.registry().account(id) {
            Some(_) => Ok(()),
            None => Err(SessionError::UnknownBuyer(id.clone()).into()),
        }
    }

    pub fn request_session(&mut self, buyer: &AccountId, listing: &ListingId) -> Result<Session> {
        let now = self.begin()?;
        self.require_account(buyer)?;
        let ctx = self.context(listing, now)?;
        let session = self
            .state
            .sessions()
            .decide_request(&self.session_cfg, buyer, &ctx, now)?;
        let hold = self.state.ledger().prepare_hold(
            &session.session_id,
            buyer,
            &ctx.seller_id,
            ctx.rate,
            self.config.hold_cap_minutes,
            now,
        )?;
        let id = session.session_id.clone();
        self.commit(Event::SessionRequested { session, hold }, now)?;
        self.session(&id).cloned()
    }

    pub fn book_appointment(
        &mut self,
        buyer: &AccountId,
        listing: &ListingId,
        slot_start: Timestamp,
    ) -> Result<(Appointment, Session)> {
        let now = self.begin()?;
        self.require_account(buyer)?;
        let ctx = self.context(listing, slot_start)?;
        let (appointment, session) =
            self.state
                .sessions()
                .decide_booking(&self.session_cfg, buyer, &ctx, slot_start, now)?;
        let hold = self.state.ledger().prepare_hold(
            &session.session_id,
            buyer,
            &ctx.seller_id,
            ctx.rate,
            self.config.hold_cap_minutes,
            now,
        )?;
        let id = session.session_id.clone();
        self.commit(
            Event::AppointmentBooked {
                appointment: appointment.clone(),
                session,
                hold,
            },
            now,
        )?;
        Ok((appointment, self.session(&id)?.clone()))
    }

    pub fn respond(&mut self, seller: &AccountId, id: &SessionId, decision: Decision) -> Result<Session> {
        let now = self.begin()?;
        let change = self
            .state
            .sessions()
            .decide_respond(&self.session_cfg, seller, id, decision, now)?;
        let p = self.progress(vec![change]);
        self.commit(Event::SessionResponded(p), now)?;
        self.session(id).cloned()
    }

    pub fn cancel_appointment(&mut self, caller: &AccountId, id: &SessionId) -> Result<Session> {
        let now = self.begin()?;
        let change = self.state.sessions().decide_cancel(caller, id, now)?;
        let p = self.progress(vec![change]);
        self.commit(Event::AppointmentCanceled(p), now)?;
        self.session(id).cloned()
    }

    pub fn join(&mut self, party: &AccountId, id: &SessionId) -> Result<Session> {
        let now = self.begin()?;
        if let Some(change) = self.state.sessions().decide_join(party, id, now)? {
            let p = self.progress(vec![change]);
            self.commit(Event::PartyJoined(p), now)?;
        }
        self.session(id).cloned()
    }

    /// Acknowledges the party's presence; the reply carries the mutually
    /// acknowledged seconds so far.
    pub fn heartbeat(&mut self, party: &AccountId, id: &SessionId) -> Result<Session> {
        let now = self.begin()?;
        let changes = self.state.sessions().decide_heartbeat(party, id, now)?;
        let p = self.progress(changes);
        self.commit(Event::HeartbeatAcked(p), now)?;
        self.session(id).cloned()
    }

    pub fn end_session(&mut self, party: &AccountId, id: &SessionId) -> Result<Ended> {
        let now = self.begin()?;
        let change = self.state.sessions().decide_end(party, id, now)?;
        let p = self.progress(vec![change]);
        self.commit(Event::SessionEnded(p), now)?;
        Ok(Ended {
            session: self.session(id)?.clone(),
            receipt: self.receipt(id)?.clone(),
        })
    }

    pub fn rate_session(&mut self, buyer: &AccountId, id: &SessionId, stars: u32, review: &str) -> Result<Rating> {
        let now = self.begin()?;
        let session = self.state.sessions().get(id)?;
        let rating = self
            .state
            .reputation()
            .prepare_rating(buyer, session, stars, review, now)?;
        self.commit(Event::RatingPosted { rating: rating.clone() }, now)?;
        Ok(rating)
    }

    pub fn record_trace(&mut self, trace: TransactionTrace) -> Result<()> {
        let now = self.begin()?;
        self.state.sessions().get(&trace.session_id)?;
        trace.validate()?;
        self.commit(Event::TraceRecorded { trace }, now)?;
        Ok(())
    }

    pub fn session(&self, id: &SessionId) -> Result<&Session> {
        Ok(self.state.sessions().get(id)?)
    }

    pub fn appointment_of(&self, session: &Session) -> Option<&Appointment> {
        session
            .appointment_id
            .as_ref()
            .and_then(|a| self.state.sessions().appointment(a))
    }

    pub fn balance(&self, account: &AccountId) -> Result<Balance> {
        Ok(self.state.ledger().balance(account)?)
    }

    pub fn statement(&self, account: &AccountId, from: Timestamp, to: Timestamp) -> Result<Vec<LedgerEntry>> {
        Ok(self.state.ledger().statement(account, from, to)?)
    }

    pub fn receipt(&self, id: &SessionId) -> Result<&SettlementReceipt> {
        self.state.sessions().get(id)?;
        self.state
            .ledger()
            .receipt(id)
            .ok_or_else(|| BillingError::NoReceipt(id.clone()).into())
    }

    pub fn seller_summary(&self, seller: &AccountId) -> Result<SellerSummary> {
        if self.state.registry().account(seller).is_none() {
            return Err(RegistryError::UnknownSeller(seller.clone()).into());
        }
        Ok(self.state.reputation().summary(seller))
    }

    pub fn transaction_costs(&self) -> Vec<MetricBucket> {
        self.state.traces().aggregates()
    }
}
