//! Per-session channels: relays negotiation and chat frames between the two
//! parties, treats every client frame as a heartbeat, and emits meter and
//! ended frames from the server. Transport-agnostic; the WebSocket route is
//! a thin adapter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc::{unbounded_channel, UnboundedReceiver, UnboundedSender};

use crate::kernel::{compute_charge, AccountId, Money, SessionId, Timestamp};
use crate::platform::Platform;
use crate::session::{Party, Session, SessionState};

use super::error::ApiError;

pub const MAX_FRAME_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameType {
    Offer,
    Answer,
    Candidate,
    Chat,
    Meter,
    Ended,
}

impl FrameType {
    pub fn server_only(self) -> bool {
        matches!(self, FrameType::Meter | FrameType::Ended)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSender {
    Buyer,
    Seller,
    Server,
}

impl From<Party> for FrameSender {
    fn from(p: Party) -> Self {
        match p {
            Party::Buyer => FrameSender::Buyer,
            Party::Seller => FrameSender::Seller,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFrame {
    pub frame_type: FrameType,
    pub session_id: SessionId,
    pub sender: FrameSender,
    pub body: Value,
    pub sent_at: Timestamp,
}

/// The part of a frame a client supplies; the server fills in the rest.
#[derive(Debug, Clone, Deserialize)]
struct ClientFrame {
    frame_type: FrameType,
    #[serde(default)]
    body: Value,
}

#[derive(Debug)]
struct Conn {
    id: u64,
    account: AccountId,
    tx: UnboundedSender<ChannelFrame>,
}

/// A party's end of a channel.
#[derive(Debug)]
pub struct ChannelHandle {
    pub conn_id: u64,
    pub party: Party,
    pub frames: UnboundedReceiver<ChannelFrame>,
}

#[derive(Debug, Default)]
pub struct ChannelHub {
    conns: BTreeMap<(SessionId, Party), Conn>,
    issued: u64,
}

fn refused(msg: impl Into<String>) -> ApiError {
    ApiError::new("ChannelRefused", msg)
}

impl ChannelHub {
    pub fn new() -> Self {
        ChannelHub::default()
    }

    pub fn connections(&self) -> usize {
        self.conns.len()
    }

    /// Joins `account` to the session and registers its channel. A second
    /// channel for the same party replaces the first.
    pub fn open(
        &mut self,
        p: &mut Platform,
        session_id: &SessionId,
        account: &AccountId,
    ) -> Result<ChannelHandle, ApiError> {
        p.tick()?;
        self.dispatch(p);
        let session = p.session(session_id)?;
        let party = session
            .party_of(account)
            .ok_or_else(|| refused("caller is not a party to this session"))?;
        if !matches!(
            session.state,
            SessionState::Accepted | SessionState::Live | SessionState::Scheduled
        ) {
            return Err(refused(format!("session is {}", session.state.name())));
        }
        let was_live = session.state == SessionState::Live;
        p.join(account, session_id).map_err(|e| refused(e.to_string()))?;
        let (tx, rx) = unbounded_channel();
        self.issued += 1;
        let conn_id = self.issued;
        self.conns.insert(
            (session_id.clone(), party),
            Conn {
                id: conn_id,
                account: account.clone(),
                tx,
            },
        );
        self.dispatch(p);
        // a join that made the session live was already announced by dispatch
        if let Ok(s) = p.session(session_id) {
            if was_live && s.state == SessionState::Live {
                let frame = meter_frame(p, s);
                self.send(session_id, party, frame);
            }
        }
        Ok(ChannelHandle {
            conn_id,
            party,
            frames: rx,
        })
    }

    /// Handles one client frame: size and type checks, heartbeat, relay.
    pub fn inbound(
        &mut self,
        p: &mut Platform,
        session_id: &SessionId,
        party: Party,
        raw: &str,
    ) -> Result<(), ApiError> {
        if raw.len() > MAX_FRAME_BYTES {
            return Err(ApiError::new(
                "FrameTooLarge",
                format!("{} bytes exceeds {MAX_FRAME_BYTES}", raw.len()),
            ));
        }
        let frame: ClientFrame = serde_json::from_str(raw).map_err(|e| ApiError::new("InvalidFrame", e.to_string()))?;
        if frame.frame_type.server_only() {
            return Err(ApiError::new(
                "InvalidFrame",
                "meter and ended frames come only from the server",
            ));
        }
        self.keepalive(p, session_id, party);
        let out = ChannelFrame {
            frame_type: frame.frame_type,
            session_id: session_id.clone(),
            sender: party.into(),
            body: frame.body,
            sent_at: p.now(),
        };
        self.send(session_id, party.peer(), out);
        Ok(())
    }

    /// Counts as a heartbeat from the party while the session is live.
    pub fn keepalive(&mut self, p: &mut Platform, session_id: &SessionId, party: Party) {
        let Some(account) = self.conns.get(&(session_id.clone(), party)).map(|c| c.account.clone()) else {
            return;
        };
        let live = p.session(session_id).is_ok_and(|s| s.state == SessionState::Live);
        if live {
            // losing a race with a timeout is fine: the ended frame follows
            let _ = p.heartbeat(&account, session_id);
        }
        self.dispatch(p);
    }

    /// Drops a channel unless it has already been replaced.
    pub fn close(&mut self, session_id: &SessionId, party: Party, conn_id: u64) {
        let key = (session_id.clone(), party);
        if self.conns.get(&key).is_some_and(|c| c.id == conn_id) {
            self.conns.remove(&key);
        }
    }

    /// Runs once per second: fires timeouts, then sends a meter frame on
    /// every live session with an open channel.
    pub fn pump(&mut self, p: &mut Platform) {
        if let Err(e) = p.tick() {
            eprintln!("tick failed: {e}");
        }
        self.dispatch(p);
        let live: Vec<SessionId> = self
            .conns
            .keys()
            .map(|(s, _)| s.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for sid in live {
            let Ok(session) = p.session(&sid) else {
                continue;
            };
            if session.state == SessionState::Live {
                let frame = meter_frame(p, session);
                self.broadcast(&sid, frame);
            }
        }
    }

    /// Pushes frames for state changes made since the last call.
    pub fn dispatch(&mut self, p: &mut Platform) {
        for change in p.drain_changes() {
            let sid = &change.session_id;
            let Ok(session) = p.session(sid) else {
                continue;
            };
            match change.to {
                SessionState::Live => {
                    let frame = meter_frame(p, session);
                    self.broadcast(sid, frame);
                }
                SessionState::Settled | SessionState::Expired | SessionState::Rejected | SessionState::Canceled => {
                    let frame = ended_frame(p, session);
                    self.broadcast(sid, frame);
                    self.conns.remove(&(sid.clone(), Party::Buyer));
                    self.conns.remove(&(sid.clone(), Party::Seller));
                }
                _ => {}
            }
        }
    }

    fn send(&mut self, sid: &SessionId, party: Party, frame: ChannelFrame) {
        let key = (sid.clone(), party);
        if let Some(conn) = self.conns.get(&key) {
            if conn.tx.send(frame).is_err() {
                self.conns.remove(&key);
            }
        }
    }

    fn broadcast(&mut self, sid: &SessionId, frame: ChannelFrame) {
        self.send(sid, Party::Buyer, frame.clone());
        self.send(sid, Party::Seller, frame);
    }
}

fn accrued(p: &Platform, session: &Session) -> Money {
    p.state()
        .ledger()
        .hold(&session.session_id)
        .map_or(Money::ZERO, |h| compute_charge(h.rate, session.metered_seconds))
}

fn meter_frame(p: &Platform, session: &Session) -> ChannelFrame {
    ChannelFrame {
        frame_type: FrameType::Meter,
        session_id: session.session_id.clone(),
        sender: FrameSender::Server,
        body: json!({
            "state": session.state,
            "metered_seconds": session.metered_seconds,
            "accrued_charge": accrued(p, session),
        }),
        sent_at: p.now(),
    }
}

fn ended_frame(p: &Platform, session: &Session) -> ChannelFrame {
    let receipt = p.state().ledger().receipt(&session.session_id);
    ChannelFrame {
        frame_type: FrameType::Ended,
        session_id: session.session_id.clone(),
        sender: FrameSender::Server,
        body: json!({
            "state": session.state,
            "end_reason": session.end_reason,
            "metered_seconds": session.metered_seconds,
            "settlement_id": receipt.map(|r| r.settlement_id.clone()),
            "receipt": receipt,
        }),
        sent_at: p.now(),
    }
}
