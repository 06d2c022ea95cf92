//! Escrow holds, commission settlement and the double-entry ledger.
//!
//! Balances are a closed loop: accounts start with an endowment and money
//! only moves between accounts, so the sum of all `balance - endowment` is
//! always zero.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{
    compute_charge, split_commission, AccountId, CommissionBps, EntryId, HoldId, Money, Rate, SessionId, SettlementId,
    Timestamp,
};
use crate::session::{EndReason, Session, SessionState};

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum BillingError {
    #[error("available balance {available} is below the required hold of {required}")]
    InsufficientFunds { available: Money, required: Money },
    #[error("session {0} already has a hold")]
    DuplicateHold(SessionId),
    #[error("session {0} has not ended")]
    NotEnded(SessionId),
    #[error("session {0} has no open hold")]
    NoOpenHold(SessionId),
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("no settlement receipt for session {0}")]
    NoReceipt(SessionId),
}

impl BillingError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HoldState {
    Open,
    Captured,
    Released,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hold {
    pub hold_id: HoldId,
    pub session_id: SessionId,
    pub buyer_id: AccountId,
    pub seller_id: AccountId,
    pub rate: Rate,
    pub cap: Money,
    pub state: HoldState,
    pub captured: Money,
    pub opened_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub entry_id: EntryId,
    pub settlement_id: SettlementId,
    pub account: AccountId,
    pub delta: i64,
    pub posted_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementReceipt {
    pub settlement_id: SettlementId,
    pub session_id: SessionId,
    pub buyer_id: AccountId,
    pub seller_id: AccountId,
    pub metered_seconds: u64,
    pub charge: Money,
    pub commission: Money,
    pub seller_credit: Money,
    pub commission_bps: CommissionBps,
    pub settled_at: Timestamp,
}

/// A receipt and the entries it posts, applied together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub receipt: SettlementReceipt,
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SettleOutcome {
    New(Settlement),
    /// The session was settled before; nothing new to post.
    Existing(SettlementReceipt),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Balance {
    pub available: Money,
    pub held: Money,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Funds {
    endowment: Money,
    posted: i64,
    held: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    funds: BTreeMap<AccountId, Funds>,
    holds: BTreeMap<SessionId, Hold>,
    entries: Vec<LedgerEntry>,
    receipts: BTreeMap<SessionId, SettlementReceipt>,
}

impl Default for Ledger {
    fn default() -> Self {
        let mut funds = BTreeMap::new();
        funds.insert(AccountId::platform(), Funds::default());
        Ledger {
            funds,
            holds: BTreeMap::new(),
            entries: Vec::new(),
            receipts: BTreeMap::new(),
        }
    }
}

/// Hold cover for a rate: `cap_minutes` of a per-minute price, or the flat fee.
pub fn hold_cap(rate: Rate, cap_minutes: u64) -> Money {
    match rate {
        Rate::PerMinute { per_minute } => Money::cents(per_minute.amount().saturating_mul(cap_minutes)),
        Rate::PerCase { per_case } => per_case,
    }
}

impl Ledger {
    pub fn new() -> Self {
        Ledger::default()
    }

    pub fn open_account(&mut self, account: &AccountId, endowment: Money) {
        self.funds.entry(account.clone()).or_insert(Funds {
            endowment,
            ..Funds::default()
        });
    }

    pub fn endowment(&self, account: &AccountId) -> Option<Money> {
        self.funds.get(account).map(|f| f.endowment)
    }

    pub fn balance(&self, account: &AccountId) -> Result<Balance, BillingError> {
        let funds = self
            .funds
            .get(account)
            .ok_or_else(|| BillingError::UnknownAccount(account.clone()))?;
        let available = funds.endowment.amount() as i128 + funds.posted as i128 - funds.held.amount() as i128;
        debug_assert!(available >= 0, "negative balance for {account}");
        Ok(Balance {
            available: Money::cents(available.max(0) as u64),
            held: funds.held,
        })
    }

    pub fn prepare_hold(
        &self,
        session_id: &SessionId,
        buyer: &AccountId,
        seller: &AccountId,
        rate: Rate,
        cap_minutes: u64,
        now: Timestamp,
    ) -> Result<Hold, BillingError> {
        if self.holds.contains_key(session_id) {
            return Err(BillingError::DuplicateHold(session_id.clone()));
        }
        let cap = hold_cap(rate, cap_minutes);
        let available = self.balance(buyer)?.available;
        if available < cap {
            return Err(BillingError::InsufficientFunds {
                available,
                required: cap,
            });
        }
        Ok(Hold {
            hold_id: HoldId::for_session(session_id),
            session_id: session_id.clone(),
            buyer_id: buyer.clone(),
            seller_id: seller.clone(),
            rate,
            cap,
            state: HoldState::Open,
            captured: Money::ZERO,
            opened_at: now,
        })
    }

    pub fn insert_hold(&mut self, hold: Hold) {
        if let Some(f) = self.funds.get_mut(&hold.buyer_id) {
            f.held += hold.cap;
        }
        self.holds.insert(hold.session_id.clone(), hold);
    }

    pub fn open_hold(
        &mut self,
        session_id: &SessionId,
        buyer: &AccountId,
        seller: &AccountId,
        rate: Rate,
        cap_minutes: u64,
        now: Timestamp,
    ) -> Result<Hold, BillingError> {
        let hold = self.prepare_hold(session_id, buyer, seller, rate, cap_minutes, now)?;
        self.insert_hold(hold.clone());
        Ok(hold)
    }

    pub fn hold(&self, session_id: &SessionId) -> Option<&Hold> {
        self.holds.get(session_id)
    }

    /// Returns an open hold's reservation to the buyer. No-op otherwise.
    pub fn release_hold(&mut self, session_id: &SessionId) {
        let Some(hold) = self.holds.get_mut(session_id) else {
            return;
        };
        if hold.state != HoldState::Open {
            return;
        }
        hold.state = HoldState::Released;
        if let Some(f) = self.funds.get_mut(&hold.buyer_id) {
            f.held = f.held.saturating_sub(hold.cap);
        }
    }

    /// Works out the settlement for an Ended session without posting it.
    pub fn prepare_settlement(
        &self,
        session: &Session,
        bps: CommissionBps,
        now: Timestamp,
    ) -> Result<SettleOutcome, BillingError> {
        if let Some(receipt) = self.receipts.get(&session.session_id) {
            return Ok(SettleOutcome::Existing(receipt.clone()));
        }
        if session.state != SessionState::Ended {
            return Err(BillingError::NotEnded(session.session_id.clone()));
        }
        let hold = self
            .holds
            .get(&session.session_id)
            .filter(|h| h.state == HoldState::Open)
            .ok_or_else(|| BillingError::NoOpenHold(session.session_id.clone()))?;
        let no_mutual_time = session.metered_seconds == 0 && session.end_reason == Some(EndReason::HeartbeatLoss);
        let charge = if no_mutual_time {
            Money::ZERO
        } else {
            compute_charge(hold.rate, session.metered_seconds).min(hold.cap)
        };
        let (commission, seller_credit) = split_commission(charge, bps);
        let settlement_id = SettlementId::for_session(&session.session_id);
        let receipt = SettlementReceipt {
            settlement_id: settlement_id.clone(),
            session_id: session.session_id.clone(),
            buyer_id: hold.buyer_id.clone(),
            seller_id: hold.seller_id.clone(),
            metered_seconds: session.metered_seconds,
            charge,
            commission,
            seller_credit,
            commission_bps: bps,
            settled_at: now,
        };
        let mut entries = Vec::with_capacity(3);
        if charge > Money::ZERO {
            let legs = [
                (hold.buyer_id.clone(), -charge.as_delta()),
                (hold.seller_id.clone(), seller_credit.as_delta()),
                (AccountId::platform(), commission.as_delta()),
            ];
            for (account, delta) in legs.into_iter().filter(|(_, d)| *d != 0) {
                entries.push(LedgerEntry {
                    entry_id: EntryId::nth(self.entries.len() as u64 + entries.len() as u64 + 1),
                    settlement_id: settlement_id.clone(),
                    account,
                    delta,
                    posted_at: now,
                });
            }
        }
        Ok(SettleOutcome::New(Settlement { receipt, entries }))
    }

    pub fn apply_settlement(&mut self, settlement: &Settlement) {
        let receipt = &settlement.receipt;
        if self.receipts.contains_key(&receipt.session_id) {
            return;
        }
        if let Some(hold) = self.holds.get_mut(&receipt.session_id) {
            if hold.state == HoldState::Open {
                if let Some(f) = self.funds.get_mut(&hold.buyer_id) {
                    f.held = f.held.saturating_sub(hold.cap);
                }
            }
            hold.state = HoldState::Captured;
            hold.captured = receipt.charge;
        }
        for entry in &settlement.entries {
            self.funds.entry(entry.account.clone()).or_default().posted += entry.delta;
            self.entries.push(entry.clone());
        }
        self.receipts.insert(receipt.session_id.clone(), receipt.clone());
    }

    /// Idempotent: a second call returns the first receipt and posts nothing.
    pub fn settle_session(
        &mut self,
        session: &Session,
        bps: CommissionBps,
        now: Timestamp,
    ) -> Result<SettlementReceipt, BillingError> {
        match self.prepare_settlement(session, bps, now)? {
            SettleOutcome::Existing(receipt) => Ok(receipt),
            SettleOutcome::New(settlement) => {
                self.apply_settlement(&settlement);
                Ok(settlement.receipt)
            }
        }
    }

    pub fn receipt(&self, session_id: &SessionId) -> Option<&SettlementReceipt> {
        self.receipts.get(session_id)
    }

    pub fn receipts(&self) -> impl Iterator<Item = &SettlementReceipt> {
        self.receipts.values()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn holds(&self) -> impl Iterator<Item = &Hold> {
        self.holds.values()
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AccountId> {
        self.funds.keys()
    }

    /// Entries for `account` posted in `[from, to)`, by time then posting order.
    pub fn statement(
        &self,
        account: &AccountId,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<LedgerEntry>, BillingError> {
        if !self.funds.contains_key(account) {
            return Err(BillingError::UnknownAccount(account.clone()));
        }
        let mut out: Vec<LedgerEntry> = self
            .entries
            .iter()
            .filter(|e| &e.account == account && from <= e.posted_at && e.posted_at < to)
            .cloned()
            .collect();
        // entries are stored in posting order; stable sort keeps it within equal times
        out.sort_by_key(|e| e.posted_at);
        Ok(out)
    }

    /// Sum over all accounts of `balance - endowment`. Zero whenever nothing is mid-flight.
    pub fn net_drift(&self) -> i128 {
        self.funds.values().map(|f| f.posted as i128).sum()
    }
}
