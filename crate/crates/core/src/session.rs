//! Session lifecycle: request, response or booking, join, metered live
//! conversation, end and settlement.
//!
//! ```text
//! Requested ──L1──▶ Accepted ──both joined──▶ Live ──▶ Ended ──▶ Settled
//!     │                ▲   │
//!     └──L2──▶ Pending ┘   └──join timeout──▶ Expired
//!                 │
//!                 ├──reject──▶ Rejected
//!                 └──timeout─▶ Expired
//! Scheduled (L3) ──first join──▶ Accepted, ──no-show──▶ Expired, ──cancel──▶ Canceled
//! ```
//!
//! Every operation is split into a pure decision (`decide_*`, `&self`) that
//! yields [`SessionChange`]s and [`SessionEngine::apply`], the only mutator.
//! Changes carry their own timestamps so replaying them never consults a clock.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{AccountId, AppointmentId, ListingId, Rate, SessionId, Timestamp};
use crate::registry::ServiceLevel;

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum SessionError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("unknown buyer {0}")]
    UnknownBuyer(AccountId),
    #[error("listing {0} is not active")]
    ListingInactive(ListingId),
    #[error("sellers cannot buy their own listing")]
    OwnListing,
    #[error("seller is not on duty for this listing right now")]
    SellerOffDuty,
    #[error("this service is offered by appointment only")]
    AppointmentRequired,
    #[error("seller is at concurrent-session capacity")]
    SellerBusy,
    #[error("session is not awaiting a response")]
    NotPending,
    #[error("caller is not a party to this session")]
    NotYourSession,
    #[error("response deadline passed; the request expired")]
    DeadlinePassed,
    #[error("slot is taken or already in the past")]
    SlotUnavailable,
    #[error("slot does not fall in an appointment window")]
    NotL3Window,
    #[error("slot must start on a {0}-second grid")]
    SlotMisaligned(u64),
    #[error("session cannot be joined in its current state")]
    NotJoinable,
    #[error("appointment join window is not open")]
    JoinWindowClosed,
    #[error("session is not live")]
    NotLive,
    #[error("only scheduled appointments can be canceled")]
    NotScheduled,
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, IntoStaticStr)]
pub enum SessionState {
    Requested,
    Pending,
    Scheduled,
    Accepted,
    Live,
    Ended,
    Settled,
    Rejected,
    Expired,
    Canceled,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionState::Settled | SessionState::Rejected | SessionState::Expired | SessionState::Canceled
        )
    }

    pub fn can_become(self, next: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, next),
            (Requested, Accepted | Pending | Rejected)
                | (Pending, Accepted | Rejected | Expired)
                | (Scheduled, Accepted | Expired | Canceled)
                | (Accepted, Live | Expired)
                | (Live, Ended)
                | (Ended, Settled)
        )
    }

    pub fn name(self) -> &'static str {
        self.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, IntoStaticStr)]
pub enum EndReason {
    BuyerEnded,
    SellerEnded,
    HeartbeatLoss,
    AppointmentNoShow,
    AdminAbort,
    /// Metered time reached the hold's cover.
    HoldCapReached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Buyer,
    Seller,
}

impl Party {
    pub fn peer(self) -> Party {
        match self {
            Party::Buyer => Party::Seller,
            Party::Seller => Party::Buyer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub buyer_id: AccountId,
    pub seller_id: AccountId,
    pub listing_id: ListingId,
    pub level_at_request: ServiceLevel,
    pub state: SessionState,
    pub requested_at: Timestamp,
    pub accepted_at: Option<Timestamp>,
    pub started_at: Option<Timestamp>,
    pub ended_at: Option<Timestamp>,
    /// When a Rejected, Expired or Canceled session closed.
    pub closed_at: Option<Timestamp>,
    pub response_deadline: Option<Timestamp>,
    pub join_deadline: Option<Timestamp>,
    pub appointment_id: Option<AppointmentId>,
    pub buyer_joined: bool,
    pub seller_joined: bool,
    pub buyer_ack: Option<Timestamp>,
    pub seller_ack: Option<Timestamp>,
    pub metered_seconds: u64,
    /// Live time covered by the billing hold, absent for flat-priced sessions.
    pub max_live_seconds: Option<u64>,
    pub end_reason: Option<EndReason>,
    /// Every state the session has been in, oldest first.
    pub history: Vec<SessionState>,
}

impl Session {
    pub fn requested(
        session_id: SessionId,
        buyer_id: AccountId,
        seller_id: AccountId,
        listing_id: ListingId,
        level: ServiceLevel,
        now: Timestamp,
    ) -> Self {
        Session {
            session_id,
            buyer_id,
            seller_id,
            listing_id,
            level_at_request: level,
            state: SessionState::Requested,
            requested_at: now,
            accepted_at: None,
            started_at: None,
            ended_at: None,
            closed_at: None,
            response_deadline: None,
            join_deadline: None,
            appointment_id: None,
            buyer_joined: false,
            seller_joined: false,
            buyer_ack: None,
            seller_ack: None,
            metered_seconds: 0,
            max_live_seconds: None,
            end_reason: None,
            history: vec![SessionState::Requested],
        }
    }

    pub fn party_of(&self, account: &AccountId) -> Option<Party> {
        if account == &self.buyer_id {
            Some(Party::Buyer)
        } else if account == &self.seller_id {
            Some(Party::Seller)
        } else {
            None
        }
    }

    pub fn account_of(&self, party: Party) -> &AccountId {
        match party {
            Party::Buyer => &self.buyer_id,
            Party::Seller => &self.seller_id,
        }
    }

    fn transition(&mut self, next: SessionState) {
        debug_assert!(
            self.state.can_become(next),
            "illegal transition {:?} -> {:?}",
            self.state,
            next
        );
        self.state = next;
        self.history.push(next);
    }

    /// Latest instant acknowledged by both parties.
    fn mutual_ack(&self) -> Option<Timestamp> {
        Some(self.buyer_ack?.min(self.seller_ack?))
    }

    fn metered_until(&self, t: Timestamp) -> u64 {
        let started = self.started_at.unwrap_or(t);
        let secs = t.secs_since(started);
        self.max_live_seconds.map_or(secs, |cap| secs.min(cap))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Appointment {
    pub appointment_id: AppointmentId,
    pub session_id: SessionId,
    pub listing_id: ListingId,
    pub buyer_id: AccountId,
    pub seller_id: AccountId,
    pub slot_start: Timestamp,
    pub grace_seconds: u64,
    pub booked_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub seller_capacity: u32,
    pub pending_timeout_s: u64,
    pub appointment_grace_s: u64,
    pub join_timeout_s: u64,
    pub heartbeat_grace_s: u64,
    pub slot_grid_s: u64,
    /// Hold cover in minutes of a per-minute rate; bounds live time.
    pub hold_cap_minutes: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            seller_capacity: 1,
            pending_timeout_s: 60,
            appointment_grace_s: 120,
            join_timeout_s: 120,
            heartbeat_grace_s: 5,
            slot_grid_s: 300,
            hold_cap_minutes: 30,
        }
    }
}

/// What the engine needs to know about a listing at request time.
#[derive(Debug, Clone)]
pub struct ListingContext {
    pub listing_id: ListingId,
    pub seller_id: AccountId,
    pub active: bool,
    pub rate: Rate,
    /// Level of the window covering the instant in question.
    pub level: Option<ServiceLevel>,
}

/// A fact about one session. Applying a change never fails.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change")]
pub enum SessionChange {
    Opened {
        session: Session,
    },
    Booked {
        appointment: Appointment,
        session: Session,
    },
    Responded {
        session_id: SessionId,
        decision: Decision,
        at: Timestamp,
        join_deadline: Option<Timestamp>,
    },
    Joined {
        session_id: SessionId,
        party: Party,
        at: Timestamp,
    },
    Acked {
        session_id: SessionId,
        party: Party,
        at: Timestamp,
    },
    Ended {
        session_id: SessionId,
        at: Timestamp,
        reason: EndReason,
        metered_seconds: u64,
    },
    Expired {
        session_id: SessionId,
        at: Timestamp,
        reason: Option<EndReason>,
    },
    Canceled {
        session_id: SessionId,
        at: Timestamp,
    },
    Settled {
        session_id: SessionId,
        at: Timestamp,
    },
}

impl SessionChange {
    pub fn session_id(&self) -> &SessionId {
        match self {
            SessionChange::Opened { session } | SessionChange::Booked { session, .. } => &session.session_id,
            SessionChange::Responded { session_id, .. }
            | SessionChange::Joined { session_id, .. }
            | SessionChange::Acked { session_id, .. }
            | SessionChange::Ended { session_id, .. }
            | SessionChange::Expired { session_id, .. }
            | SessionChange::Canceled { session_id, .. }
            | SessionChange::Settled { session_id, .. } => session_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateChange {
    pub session_id: SessionId,
    pub from: SessionState,
    pub to: SessionState,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionEngine {
    sessions: BTreeMap<SessionId, Session>,
    /// Sessions not yet in a terminal state.
    open: BTreeSet<SessionId>,
    appointments: BTreeMap<AppointmentId, Appointment>,
    booked_slots: BTreeMap<ListingId, BTreeMap<Timestamp, SessionId>>,
}

impl SessionEngine {
    pub fn new() -> Self {
        SessionEngine::default()
    }

    pub fn session(&self, id: &SessionId) -> Option<&Session> {
        self.sessions.get(id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn open_sessions(&self) -> impl Iterator<Item = &Session> {
        self.open.iter().filter_map(|id| self.sessions.get(id))
    }

    pub fn appointment(&self, id: &AppointmentId) -> Option<&Appointment> {
        self.appointments.get(id)
    }

    pub fn appointments(&self) -> impl Iterator<Item = &Appointment> {
        self.appointments.values()
    }

    pub fn get(&self, id: &SessionId) -> Result<&Session, SessionError> {
        self.sessions
            .get(id)
            .ok_or_else(|| SessionError::UnknownSession(id.clone()))
    }

    /// Sessions that currently occupy one of the seller's concurrent slots.
    pub fn seller_load(&self, seller: &AccountId) -> u32 {
        self.open_sessions()
            .filter(|s| &s.seller_id == seller)
            .filter(|s| {
                matches!(
                    s.state,
                    SessionState::Pending | SessionState::Accepted | SessionState::Live
                )
            })
            .count() as u32
    }

    fn next_session_id(&self) -> SessionId {
        SessionId::nth(self.sessions.len() as u64 + 1)
    }

    fn live_cap(cfg: &SessionConfig, rate: Rate) -> Option<u64> {
        match rate {
            Rate::PerMinute { .. } => Some(cfg.hold_cap_minutes.saturating_mul(60)),
            Rate::PerCase { .. } => None,
        }
    }

    pub fn decide_request(
        &self,
        cfg: &SessionConfig,
        buyer: &AccountId,
        listing: &ListingContext,
        now: Timestamp,
    ) -> Result<Session, SessionError> {
        if buyer == &listing.seller_id {
            return Err(SessionError::OwnListing);
        }
        if !listing.active {
            return Err(SessionError::ListingInactive(listing.listing_id.clone()));
        }
        let level = listing.level.ok_or(SessionError::SellerOffDuty)?;
        if level == ServiceLevel::ByAppointment {
            return Err(SessionError::AppointmentRequired);
        }
        if self.seller_load(&listing.seller_id) >= cfg.seller_capacity {
            return Err(SessionError::SellerBusy);
        }
        let mut session = Session::requested(
            self.next_session_id(),
            buyer.clone(),
            listing.seller_id.clone(),
            listing.listing_id.clone(),
            level,
            now,
        );
        session.max_live_seconds = Self::live_cap(cfg, listing.rate);
        match level {
            ServiceLevel::Unconditional => {
                // the seller is never consulted
                session.transition(SessionState::Accepted);
                session.accepted_at = Some(now);
                session.join_deadline = Some(now + cfg.join_timeout_s);
            }
            ServiceLevel::Conditional => {
                session.transition(SessionState::Pending);
                session.response_deadline = Some(now + cfg.pending_timeout_s);
            }
            ServiceLevel::ByAppointment => unreachable!("rejected above"),
        }
        Ok(session)
    }

    pub fn decide_respond(
        &self,
        cfg: &SessionConfig,
        seller: &AccountId,
        id: &SessionId,
        decision: Decision,
        now: Timestamp,
    ) -> Result<SessionChange, SessionError> {
        let session = self.get(id)?;
        if &session.seller_id != seller {
            return Err(SessionError::NotYourSession);
        }
        match session.state {
            SessionState::Pending => {
                if session.response_deadline.is_some_and(|d| now > d) {
                    return Err(SessionError::DeadlinePassed);
                }
                Ok(SessionChange::Responded {
                    session_id: id.clone(),
                    decision,
                    at: now,
                    join_deadline: (decision == Decision::Accept).then(|| now + cfg.join_timeout_s),
                })
            }
            SessionState::Expired if session.response_deadline.is_some() => Err(SessionError::DeadlinePassed),
            _ => Err(SessionError::NotPending),
        }
    }

    pub fn decide_booking(
        &self,
        cfg: &SessionConfig,
        buyer: &AccountId,
        listing: &ListingContext,
        slot_start: Timestamp,
        now: Timestamp,
    ) -> Result<(Appointment, Session), SessionError> {
        if buyer == &listing.seller_id {
            return Err(SessionError::OwnListing);
        }
        if !listing.active {
            return Err(SessionError::ListingInactive(listing.listing_id.clone()));
        }
        if cfg.slot_grid_s > 0 && slot_start.unix().rem_euclid(cfg.slot_grid_s as i64) != 0 {
            return Err(SessionError::SlotMisaligned(cfg.slot_grid_s));
        }
        if listing.level != Some(ServiceLevel::ByAppointment) {
            return Err(SessionError::NotL3Window);
        }
        if slot_start < now
            || self
                .booked_slots
                .get(&listing.listing_id)
                .is_some_and(|slots| slots.contains_key(&slot_start))
        {
            return Err(SessionError::SlotUnavailable);
        }
        let appointment_id = AppointmentId::nth(self.appointments.len() as u64 + 1);
        let mut session = Session::requested(
            self.next_session_id(),
            buyer.clone(),
            listing.seller_id.clone(),
            listing.listing_id.clone(),
            ServiceLevel::ByAppointment,
            now,
        );
        // bookings enter the lifecycle directly in Scheduled
        session.state = SessionState::Scheduled;
        session.history = vec![SessionState::Scheduled];
        session.appointment_id = Some(appointment_id.clone());
        session.join_deadline = Some(slot_start + cfg.appointment_grace_s);
        session.max_live_seconds = Self::live_cap(cfg, listing.rate);
        let appointment = Appointment {
            appointment_id,
            session_id: session.session_id.clone(),
            listing_id: listing.listing_id.clone(),
            buyer_id: buyer.clone(),
            seller_id: listing.seller_id.clone(),
            slot_start,
            grace_seconds: cfg.appointment_grace_s,
            booked_at: now,
        };
        Ok((appointment, session))
    }

    pub fn decide_cancel(
        &self,
        caller: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<SessionChange, SessionError> {
        let session = self.get(id)?;
        if session.party_of(caller).is_none() {
            return Err(SessionError::NotYourSession);
        }
        if session.state != SessionState::Scheduled {
            return Err(SessionError::NotScheduled);
        }
        Ok(SessionChange::Canceled {
            session_id: id.clone(),
            at: now,
        })
    }

    /// `Ok(None)` when the party had already joined.
    pub fn decide_join(
        &self,
        party_id: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<Option<SessionChange>, SessionError> {
        let session = self.get(id)?;
        let party = session.party_of(party_id).ok_or(SessionError::NotYourSession)?;
        let already = match party {
            Party::Buyer => session.buyer_joined,
            Party::Seller => session.seller_joined,
        };
        match session.state {
            SessionState::Scheduled => {
                let appointment = session.appointment_id.as_ref().and_then(|a| self.appointments.get(a));
                let open = appointment.is_some_and(|a| a.slot_start <= now && now <= a.slot_start + a.grace_seconds);
                if !open {
                    return Err(SessionError::JoinWindowClosed);
                }
            }
            SessionState::Accepted => {
                if already {
                    return Ok(None);
                }
            }
            SessionState::Live => return Ok(None),
            SessionState::Expired if session.appointment_id.is_some() => return Err(SessionError::JoinWindowClosed),
            _ => return Err(SessionError::NotJoinable),
        }
        Ok(Some(SessionChange::Joined {
            session_id: id.clone(),
            party,
            at: now,
        }))
    }

    /// The acknowledgement for a heartbeat, plus an end if it pushes metered time to the hold cap.
    pub fn decide_heartbeat(
        &self,
        party_id: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<Vec<SessionChange>, SessionError> {
        let session = self.get(id)?;
        let party = session.party_of(party_id).ok_or(SessionError::NotYourSession)?;
        if session.state != SessionState::Live {
            return Err(SessionError::NotLive);
        }
        let mut changes = vec![SessionChange::Acked {
            session_id: id.clone(),
            party,
            at: now,
        }];
        let mut probe = session.clone();
        set_ack(&mut probe, party, now);
        if let (Some(cap), Some(started)) = (probe.max_live_seconds, probe.started_at) {
            let mutual = probe.mutual_ack().unwrap_or(started);
            if mutual.secs_since(started) >= cap {
                changes.push(SessionChange::Ended {
                    session_id: id.clone(),
                    at: started + cap,
                    reason: EndReason::HoldCapReached,
                    metered_seconds: cap,
                });
            }
        }
        Ok(changes)
    }

    pub fn decide_end(
        &self,
        party_id: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<SessionChange, SessionError> {
        let session = self.get(id)?;
        let party = session.party_of(party_id).ok_or(SessionError::NotYourSession)?;
        if session.state != SessionState::Live {
            return Err(SessionError::NotLive);
        }
        let mut probe = session.clone();
        // ending is itself an acknowledgement from the ender
        set_ack(&mut probe, party, now);
        let metered = probe.mutual_ack().map_or(0, |t| probe.metered_until(t));
        Ok(SessionChange::Ended {
            session_id: id.clone(),
            at: now,
            reason: match party {
                Party::Buyer => EndReason::BuyerEnded,
                Party::Seller => EndReason::SellerEnded,
            },
            metered_seconds: metered,
        })
    }

    /// The timeout change due for one session at `now`, if any.
    pub fn overdue(&self, cfg: &SessionConfig, session: &Session, now: Timestamp) -> Option<SessionChange> {
        let id = session.session_id.clone();
        match session.state {
            SessionState::Pending => {
                let deadline = session.response_deadline?;
                (now > deadline).then_some(SessionChange::Expired {
                    session_id: id,
                    at: deadline,
                    reason: None,
                })
            }
            SessionState::Scheduled | SessionState::Accepted => {
                let deadline = session.join_deadline?;
                (now > deadline).then(|| SessionChange::Expired {
                    session_id: id,
                    at: deadline,
                    reason: session.appointment_id.as_ref().map(|_| EndReason::AppointmentNoShow),
                })
            }
            SessionState::Live => {
                let oldest = session.mutual_ack()?;
                if now.secs_since(oldest) <= cfg.heartbeat_grace_s {
                    return None;
                }
                Some(SessionChange::Ended {
                    session_id: id,
                    at: oldest + cfg.heartbeat_grace_s,
                    reason: EndReason::HeartbeatLoss,
                    metered_seconds: session.metered_until(oldest),
                })
            }
            _ => None,
        }
    }

    /// All timeout changes due at `now`, in session id order.
    pub fn decide_tick(&self, cfg: &SessionConfig, now: Timestamp) -> Vec<SessionChange> {
        self.open_sessions().filter_map(|s| self.overdue(cfg, s, now)).collect()
    }

    pub fn apply(&mut self, change: &SessionChange) -> Option<StateChange> {
        match change {
            SessionChange::Opened { session } => {
                self.insert(session.clone());
                None
            }
            SessionChange::Booked { appointment, session } => {
                self.booked_slots
                    .entry(appointment.listing_id.clone())
                    .or_default()
                    .insert(appointment.slot_start, session.session_id.clone());
                self.appointments
                    .insert(appointment.appointment_id.clone(), appointment.clone());
                self.insert(session.clone());
                None
            }
            SessionChange::Responded {
                session_id,
                decision,
                at,
                join_deadline,
            } => self.update(session_id, |s| match decision {
                Decision::Accept => {
                    s.transition(SessionState::Accepted);
                    s.accepted_at = Some(*at);
                    s.join_deadline = *join_deadline;
                }
                Decision::Reject => {
                    s.transition(SessionState::Rejected);
                    s.closed_at = Some(*at);
                }
            }),
            SessionChange::Joined { session_id, party, at } => self.update(session_id, |s| {
                if s.state == SessionState::Scheduled {
                    s.transition(SessionState::Accepted);
                    s.accepted_at = Some(*at);
                }
                match party {
                    Party::Buyer => s.buyer_joined = true,
                    Party::Seller => s.seller_joined = true,
                }
                if s.buyer_joined && s.seller_joined && s.state == SessionState::Accepted {
                    s.transition(SessionState::Live);
                    s.started_at = Some(*at);
                    s.buyer_ack = Some(*at);
                    s.seller_ack = Some(*at);
                }
            }),
            SessionChange::Acked { session_id, party, at } => self.update(session_id, |s| {
                set_ack(s, *party, *at);
                s.metered_seconds = s.mutual_ack().map_or(0, |t| s.metered_until(t));
            }),
            SessionChange::Ended {
                session_id,
                at,
                reason,
                metered_seconds,
            } => self.update(session_id, |s| {
                s.transition(SessionState::Ended);
                s.ended_at = Some(*at);
                s.end_reason = Some(*reason);
                s.metered_seconds = *metered_seconds;
            }),
            SessionChange::Expired { session_id, at, reason } => {
                self.release_slot(session_id);
                self.update(session_id, |s| {
                    s.transition(SessionState::Expired);
                    s.closed_at = Some(*at);
                    s.end_reason = *reason;
                })
            }
            SessionChange::Canceled { session_id, at } => {
                self.release_slot(session_id);
                self.update(session_id, |s| {
                    s.transition(SessionState::Canceled);
                    s.closed_at = Some(*at);
                })
            }
            SessionChange::Settled { session_id, .. } => {
                self.update(session_id, |s| s.transition(SessionState::Settled))
            }
        }
    }

    fn insert(&mut self, session: Session) {
        if !session.state.is_terminal() {
            self.open.insert(session.session_id.clone());
        }
        self.sessions.insert(session.session_id.clone(), session);
    }

    fn release_slot(&mut self, id: &SessionId) {
        let Some(apt) = self
            .sessions
            .get(id)
            .and_then(|s| s.appointment_id.as_ref())
            .and_then(|a| self.appointments.get(a))
        else {
            return;
        };
        if let Some(slots) = self.booked_slots.get_mut(&apt.listing_id) {
            slots.remove(&apt.slot_start);
            if slots.is_empty() {
                self.booked_slots.remove(&apt.listing_id);
            }
        }
    }

    fn update(&mut self, id: &SessionId, f: impl FnOnce(&mut Session)) -> Option<StateChange> {
        let session = self.sessions.get_mut(id)?;
        let from = session.state;
        f(session);
        let to = session.state;
        if to.is_terminal() {
            self.open.remove(id);
        }
        (from != to).then(|| StateChange {
            session_id: id.clone(),
            from,
            to,
        })
    }

    /// Applies a batch of changes, returning the state changes they caused.
    pub fn apply_all<'a>(&mut self, changes: impl IntoIterator<Item = &'a SessionChange>) -> Vec<StateChange> {
        changes.into_iter().filter_map(|c| self.apply(c)).collect()
    }
}

fn set_ack(session: &mut Session, party: Party, at: Timestamp) {
    let slot = match party {
        Party::Buyer => &mut session.buyer_ack,
        Party::Seller => &mut session.seller_ack,
    };
    *slot = Some(slot.map_or(at, |prev| prev.max(at)));
}

/// Decide-and-apply wrappers for driving the engine on its own.
impl SessionEngine {
    pub fn request_session(
        &mut self,
        cfg: &SessionConfig,
        buyer: &AccountId,
        listing: &ListingContext,
        now: Timestamp,
    ) -> Result<Session, SessionError> {
        let session = self.decide_request(cfg, buyer, listing, now)?;
        self.apply(&SessionChange::Opened {
            session: session.clone(),
        });
        Ok(session)
    }

    pub fn respond(
        &mut self,
        cfg: &SessionConfig,
        seller: &AccountId,
        id: &SessionId,
        decision: Decision,
        now: Timestamp,
    ) -> Result<&Session, SessionError> {
        self.tick(cfg, now);
        let change = self.decide_respond(cfg, seller, id, decision, now)?;
        self.apply(&change);
        self.get(id)
    }

    pub fn book_appointment(
        &mut self,
        cfg: &SessionConfig,
        buyer: &AccountId,
        listing: &ListingContext,
        slot_start: Timestamp,
        now: Timestamp,
    ) -> Result<Appointment, SessionError> {
        let (appointment, session) = self.decide_booking(cfg, buyer, listing, slot_start, now)?;
        self.apply(&SessionChange::Booked {
            appointment: appointment.clone(),
            session,
        });
        Ok(appointment)
    }

    pub fn join(
        &mut self,
        cfg: &SessionConfig,
        party: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<&Session, SessionError> {
        self.tick(cfg, now);
        if let Some(change) = self.decide_join(party, id, now)? {
            self.apply(&change);
        }
        self.get(id)
    }

    pub fn heartbeat(
        &mut self,
        cfg: &SessionConfig,
        party: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<u64, SessionError> {
        self.tick(cfg, now);
        let changes = self.decide_heartbeat(party, id, now)?;
        self.apply_all(&changes);
        Ok(self.get(id)?.metered_seconds)
    }

    pub fn end_session(
        &mut self,
        cfg: &SessionConfig,
        party: &AccountId,
        id: &SessionId,
        now: Timestamp,
    ) -> Result<&Session, SessionError> {
        self.tick(cfg, now);
        let change = self.decide_end(party, id, now)?;
        self.apply(&change);
        self.get(id)
    }

    pub fn tick(&mut self, cfg: &SessionConfig, now: Timestamp) -> Vec<StateChange> {
        let changes = self.decide_tick(cfg, now);
        self.apply_all(&changes)
    }

    /// Marks an Ended session Settled. Billing decides the money side.
    pub fn mark_settled(&mut self, id: &SessionId, now: Timestamp) -> Result<(), SessionError> {
        let session = self.get(id)?;
        match session.state {
            SessionState::Ended => {
                self.apply(&SessionChange::Settled {
                    session_id: id.clone(),
                    at: now,
                });
                Ok(())
            }
            SessionState::Settled => Ok(()),
            _ => Err(SessionError::NotLive),
        }
    }
}
