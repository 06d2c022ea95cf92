//! Drivers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use burst_market::billing::SettleOutcome;
use burst_market::gateway::{ChannelFrame, FrameType, Gateway};
use burst_market::kernel::{AccountId, Clock, CommissionBps, ListingId, Money, Rate, SessionId, SimClock, Timestamp};
use burst_market::matching::{Catalog, MatchIndex, MatchQuery, MatchWeights};
use burst_market::persistence;
use burst_market::platform::{Config, Platform, PlatformError, State};
use burst_market::registry::{NewListing, ServiceLevel, ServiceListing, WindowSpec};
use burst_market::reputation::StarTally;
use burst_market::session::{Decision, Party, SessionState};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TEN_YEARS: u64 = 10 * 365 * 86_400;

pub struct World {
    pub clock: SimClock,
    pub p: Platform,
}

impl World {
    pub fn new(config: Config) -> Self {
        let clock = SimClock::default();
        let p = Platform::in_memory(config, Arc::new(clock.clone()));
        World { clock, p }
    }

    pub fn account(&mut self, name: &str) -> AccountId {
        self.p
            .register_account(name, &format!("fp-{name}"))
            .unwrap()
            .account
            .account_id
    }

    /// A listing offered at `level` from now for `span` seconds.
    pub fn listing(
        &mut self,
        seller: &AccountId,
        title: &str,
        rate: Rate,
        level: ServiceLevel,
        span: u64,
    ) -> ListingId {
        let new = NewListing {
            title: title.into(),
            description: String::new(),
            tags: vec![],
            rate,
        };
        let l = self.p.create_listing(seller, &new).unwrap();
        let start = self.clock.now();
        let window = WindowSpec {
            start,
            end: start + span,
            level,
        };
        self.p.set_availability(seller, &l.listing_id, &[window]).unwrap();
        l.listing_id
    }
}

/// Full replay equals live state, and snapshot plus tail equals full replay
/// for snapshots taken at the start, middle and end of the log.
pub fn check_replay(p: &Platform) -> Result<(), String> {
    let records = p.log().records();
    let full: State = persistence::replay(records).map_err(|e| e.to_string())?;
    if &full != p.state() {
        return Err("replay of the log differs from live state".into());
    }
    if full.digest() != p.digest() {
        return Err("replayed digest differs".into());
    }
    let last = p.log().last_seq();
    for at in [0, last / 3, last / 2, last.saturating_sub(1), last] {
        let snap = persistence::snapshot::<State>(records, at).map_err(|e| e.to_string())?;
        let restored = persistence::restore(snap, records).map_err(|e| e.to_string())?;
        if restored != full {
            return Err(format!("snapshot at seq {at} plus tail differs from full replay"));
        }
    }
    Ok(())
}

/// Per-minute charge for `secs`, rounded half up, from first principles.
pub fn oracle_charge(per_minute: u64, secs: u64) -> u64 {
    let twice = 2 * per_minute as u128 * secs as u128;
    ((twice + 60) / 120) as u64
}

/// (commission, seller credit) with the commission floored.
pub fn oracle_split(charge: u64, bps: u32) -> (u64, u64) {
    let commission = (charge as u128 * bps as u128 / 10_000) as u64;
    (commission, charge - commission)
}

fn posted(p: &Platform, account: &AccountId) -> i128 {
    let b = p.balance(account).unwrap();
    let endowment = p.state().ledger().endowment(account).unwrap_or(Money::ZERO);
    b.available.amount() as i128 + b.held.amount() as i128 - endowment.amount() as i128
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ConservationStats {
    pub sessions: usize,
    pub charged_cents: u128,
    pub silent_endings: usize,
}

pub const COMMISSIONS: [u32; 5] = [0, 1, 2000, 9999, 10000];

/// Runs `sessions` randomized metered sessions spread over the commission
/// settings and checks every money invariant after each one.
pub fn conservation_run(sessions: usize, seed: u64) -> Result<ConservationStats, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ConservationStats::default();
    for (k, &bps) in COMMISSIONS.iter().enumerate() {
        let share = sessions / COMMISSIONS.len() + usize::from(k < sessions % COMMISSIONS.len());
        let grace = 8_000;
        let config = Config {
            commission_bps: CommissionBps::new(bps).unwrap(),
            endowment_cents: 1_000_000_000_000,
            hold_cap_minutes: 121,
            heartbeat_grace_s: grace,
            ..Config::default()
        };
        let mut w = World::new(config);
        let sellers: Vec<AccountId> = (0..6).map(|i| w.account(&format!("s{i}"))).collect();
        let buyers: Vec<AccountId> = (0..6).map(|i| w.account(&format!("b{i}"))).collect();
        let platform = AccountId::platform();

        for i in 0..share {
            let seller = &sellers[i % sellers.len()];
            let buyer = &buyers[(i * 5 + 1) % buyers.len()];
            let rate = rng.gen_range(1..=10_000u64);
            let secs = rng.gen_range(0..=7_200u64);
            let listing = w.listing(
                seller,
                "consult",
                Rate::per_minute(rate),
                ServiceLevel::Unconditional,
                TEN_YEARS,
            );
            let before = [posted(&w.p, buyer), posted(&w.p, seller), posted(&w.p, &platform)];

            let s = w.p.request_session(buyer, &listing).map_err(|e| e.to_string())?;
            let sid = s.session_id;
            w.p.join(buyer, &sid).map_err(|e| e.to_string())?;
            w.p.join(seller, &sid).map_err(|e| e.to_string())?;
            w.clock.advance(secs);
            match rng.gen_range(0..3) {
                0 => {
                    w.p.heartbeat(seller, &sid).map_err(|e| e.to_string())?;
                    w.p.end_session(buyer, &sid).map_err(|e| e.to_string())?;
                }
                1 => {
                    w.p.heartbeat(buyer, &sid).map_err(|e| e.to_string())?;
                    w.p.end_session(seller, &sid).map_err(|e| e.to_string())?;
                }
                _ => {
                    w.p.heartbeat(buyer, &sid).map_err(|e| e.to_string())?;
                    w.p.heartbeat(seller, &sid).map_err(|e| e.to_string())?;
                    w.clock.advance(grace + 1);
                    w.p.tick().map_err(|e| e.to_string())?;
                    stats.silent_endings += 1;
                }
            }

            let session = w.p.session(&sid).map_err(|e| e.to_string())?;
            if session.state != SessionState::Settled {
                return Err(format!("session {sid} is {:?}, not Settled", session.state));
            }
            let r = w.p.receipt(&sid).map_err(|e| e.to_string())?;
            let charge = oracle_charge(rate, secs);
            let (commission, credit) = oracle_split(charge, bps);
            if r.metered_seconds != secs
                || r.charge.amount() != charge
                || r.commission.amount() != commission
                || r.seller_credit.amount() != credit
            {
                return Err(format!(
                    "rate {rate} secs {secs} bps {bps}: receipt {}/{}/{} over {} s, expected {charge}/{commission}/{credit}",
                    r.charge, r.commission, r.seller_credit, r.metered_seconds
                ));
            }
            if r.charge != r.commission + r.seller_credit {
                return Err(format!("receipt {} does not split its charge", r.settlement_id));
            }
            let entries: i64 =
                w.p.state()
                    .ledger()
                    .entries()
                    .iter()
                    .filter(|e| e.settlement_id == r.settlement_id)
                    .map(|e| e.delta)
                    .sum();
            if entries != 0 {
                return Err(format!("settlement {} deltas sum to {entries}", r.settlement_id));
            }
            let after = [posted(&w.p, buyer), posted(&w.p, seller), posted(&w.p, &platform)];
            let moved = [-(charge as i128), credit as i128, commission as i128];
            for j in 0..3 {
                if after[j] - before[j] != moved[j] {
                    return Err(format!(
                        "account {j} moved {} instead of {}",
                        after[j] - before[j],
                        moved[j]
                    ));
                }
            }
            stats.sessions += 1;
            stats.charged_cents += charge as u128;
        }

        let mut accounts: Vec<AccountId> = sellers.iter().chain(&buyers).cloned().collect();
        accounts.push(platform);
        let total: i128 = accounts.iter().map(|a| posted(&w.p, a)).sum();
        if total != 0 {
            return Err(format!("sum of balance minus endowment is {total} at {bps} bps"));
        }
        w.p.state().check_conservation()?;
        check_replay(&w.p)?;
    }
    Ok(stats)
}

/// Every legal transition, written out independently of the engine.
pub const LEGAL: &[(SessionState, SessionState)] = {
    use SessionState::*;
    &[
        (Requested, Accepted),
        (Requested, Pending),
        (Requested, Rejected),
        (Pending, Accepted),
        (Pending, Rejected),
        (Pending, Expired),
        (Scheduled, Accepted),
        (Scheduled, Expired),
        (Scheduled, Canceled),
        (Accepted, Live),
        (Accepted, Expired),
        (Live, Ended),
        (Ended, Settled),
    ]
};

pub fn legal(from: SessionState, to: SessionState) -> bool {
    LEGAL.contains(&(from, to))
}

fn terminal(s: SessionState) -> bool {
    matches!(
        s,
        SessionState::Settled | SessionState::Rejected | SessionState::Expired | SessionState::Canceled
    )
}

#[derive(Debug, Default, Clone)]
pub struct AutomatonStats {
    pub traces: usize,
    pub ops: usize,
    pub transitions: usize,
    pub settled: usize,
    pub double_settle_probes: usize,
    pub reached: BTreeSet<(SessionState, SessionState)>,
}

struct Trace {
    w: World,
    sellers: Vec<AccountId>,
    buyers: Vec<AccountId>,
    listings: Vec<(ListingId, AccountId, ServiceLevel)>,
    histories: BTreeMap<SessionId, Vec<SessionState>>,
}

impl Trace {
    fn new(rng: &mut ChaCha8Rng) -> Trace {
        let config = Config {
            seller_capacity: rng.gen_range(1..=2),
            hold_cap_minutes: rng.gen_range(1..=3),
            endowment_cents: rng.gen_range(200..=5_000),
            ..Config::default()
        };
        let mut w = World::new(config);
        let sellers = vec![w.account("s0"), w.account("s1")];
        let buyers = vec![w.account("b0"), w.account("b1"), w.account("b2")];
        let mut listings = Vec::new();
        for (i, level) in [
            ServiceLevel::Unconditional,
            ServiceLevel::Conditional,
            ServiceLevel::ByAppointment,
            *[ServiceLevel::Unconditional, ServiceLevel::Conditional]
                .choose(rng)
                .unwrap(),
        ]
        .into_iter()
        .enumerate()
        {
            let seller = sellers[i % 2].clone();
            let rate = if rng.gen_ratio(1, 5) {
                Rate::per_case(rng.gen_range(1..=300))
            } else {
                Rate::per_minute(rng.gen_range(1..=200))
            };
            let id = w.listing(&seller, "help", rate, level, 86_400);
            listings.push((id, seller, level));
        }
        Trace {
            w,
            sellers,
            buyers,
            listings,
            histories: BTreeMap::new(),
        }
    }

    fn party(&self, rng: &mut ChaCha8Rng, sid: &SessionId) -> AccountId {
        let s = self.w.p.session(sid).unwrap();
        match rng.gen_range(0..10) {
            0 => self.buyers.choose(rng).unwrap().clone(),
            1 => self.sellers.choose(rng).unwrap().clone(),
            n if n < 6 => s.buyer_id.clone(),
            _ => s.seller_id.clone(),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, stats: &mut AutomatonStats) -> Result<(), String> {
        let sids: Vec<SessionId> = self.histories.keys().cloned().collect();
        let pick = |rng: &mut ChaCha8Rng| sids.choose(rng).cloned();
        let op = rng.gen_range(0..100);
        match op {
            0..=14 => {
                let buyer = self.buyers.choose(rng).unwrap().clone();
                let (lid, _, level) = self.listings.choose(rng).unwrap().clone();
                match self.w.p.request_session(&buyer, &lid) {
                    Ok(s) => {
                        let want = match level {
                            ServiceLevel::Unconditional => SessionState::Accepted,
                            ServiceLevel::Conditional => SessionState::Pending,
                            ServiceLevel::ByAppointment => {
                                return Err("an appointment-only listing took a direct request".into())
                            }
                        };
                        if s.state != want {
                            return Err(format!("{level:?} request landed in {:?}", s.state));
                        }
                        if level == ServiceLevel::Conditional && s.response_deadline != Some(s.requested_at + 60) {
                            return Err("conditional response window is not 60 s".into());
                        }
                    }
                    Err(e) => {
                        if level == ServiceLevel::ByAppointment && e.code() != "AppointmentRequired" {
                            return Err(format!("appointment-only request failed with {}", e.code()));
                        }
                    }
                }
            }
            15..=22 => {
                let buyer = self.buyers.choose(rng).unwrap().clone();
                let (lid, _, _) = self.listings[2].clone();
                let grid = 300;
                let now = self.w.clock.now().unix();
                let next = now + (grid - now.rem_euclid(grid)) % grid;
                let slot = Timestamp::from_unix(next + grid * rng.gen_range(0..3));
                if let Ok((_, s)) = self.w.p.book_appointment(&buyer, &lid, slot) {
                    if s.state != SessionState::Scheduled {
                        return Err(format!("booking landed in {:?}", s.state));
                    }
                }
            }
            23..=32 => {
                if let Some(sid) = pick(rng) {
                    let who = self.party(rng, &sid);
                    let before = self.w.p.session(&sid).unwrap().clone();
                    let decision = if rng.gen_bool(0.5) {
                        Decision::Accept
                    } else {
                        Decision::Reject
                    };
                    if let Ok(s) = self.w.p.respond(&who, &sid, decision) {
                        if before.level_at_request == ServiceLevel::Unconditional {
                            return Err("a seller responded to an unconditional session".into());
                        }
                        let want = match decision {
                            Decision::Accept => SessionState::Accepted,
                            Decision::Reject => SessionState::Rejected,
                        };
                        if s.state != want {
                            return Err(format!("respond {decision:?} gave {:?}", s.state));
                        }
                    }
                }
            }
            33..=36 => {
                if let Some(sid) = pick(rng) {
                    let who = self.party(rng, &sid);
                    let _ = self.w.p.cancel_appointment(&who, &sid);
                }
            }
            37..=50 => {
                if let Some(sid) = pick(rng) {
                    let who = self.party(rng, &sid);
                    let _ = self.w.p.join(&who, &sid);
                }
            }
            51..=66 => {
                if let Some(sid) = pick(rng) {
                    let who = self.party(rng, &sid);
                    let _ = self.w.p.heartbeat(&who, &sid);
                }
            }
            67..=74 => {
                if let Some(sid) = pick(rng) {
                    let who = self.party(rng, &sid);
                    let was = self.w.p.session(&sid).unwrap().state;
                    match self.w.p.end_session(&who, &sid) {
                        Ok(ended) if ended.session.state != SessionState::Settled => {
                            return Err("an ended session was not settled".into());
                        }
                        Ok(_) if was != SessionState::Live => {
                            return Err(format!("ended a session that was {was:?}"));
                        }
                        _ => {}
                    }
                }
            }
            75..=84 => {
                let secs = *[1u64, 2, 4, 6, 30, 59, 61, 121, 300].choose(rng).unwrap();
                self.w.clock.advance(secs);
            }
            85..=92 => {
                self.w.p.tick().map_err(|e| e.to_string())?;
            }
            _ => {
                if let Some(sid) = pick(rng) {
                    self.double_settle(&sid, stats)?;
                }
            }
        }
        stats.ops += 1;
        self.audit(stats)
    }

    /// Settling a settled session again must hand back the first receipt and post nothing.
    fn double_settle(&mut self, sid: &SessionId, stats: &mut AutomatonStats) -> Result<(), String> {
        let session = self.w.p.session(sid).unwrap().clone();
        if session.state != SessionState::Settled {
            return Ok(());
        }
        stats.double_settle_probes += 1;
        let ledger = self.w.p.state().ledger();
        let first = ledger.receipt(sid).cloned().ok_or("settled without a receipt")?;
        let mut probe_session = session.clone();
        probe_session.state = SessionState::Ended;
        let bps = self.w.p.config().commission_bps;
        match ledger.prepare_settlement(&probe_session, bps, self.w.clock.now()) {
            Ok(SettleOutcome::Existing(r)) if r == first => {}
            other => return Err(format!("second settlement was not idempotent: {other:?}")),
        }
        let mut copy = ledger.clone();
        let entries = copy.entries().len();
        let again = copy
            .settle_session(&probe_session, bps, self.w.clock.now())
            .map_err(|e| e.to_string())?;
        if again != first || copy.entries().len() != entries || copy != *ledger {
            return Err("double settle changed the ledger".into());
        }
        let who = session.buyer_id.clone();
        match self.w.p.end_session(&who, sid) {
            Err(PlatformError::Session(_)) => {}
            other => return Err(format!("ending a settled session: {other:?}")),
        }
        if self.w.p.receipt(sid).map_err(|e| e.to_string())? != &first {
            return Err("receipt changed after a second end".into());
        }
        Ok(())
    }

    fn audit(&mut self, stats: &mut AutomatonStats) -> Result<(), String> {
        let now = self.w.clock.now();
        let cfg = self.w.p.config().clone();
        for s in self.w.p.state().sessions().sessions() {
            let id = &s.session_id;
            let h = &s.history;
            if h.last() != Some(&s.state) {
                return Err(format!("{id}: history does not end in the current state"));
            }
            if !matches!(h[0], SessionState::Requested | SessionState::Scheduled) {
                return Err(format!("{id}: starts in {:?}", h[0]));
            }
            let prev = self.histories.get(id).cloned().unwrap_or_default();
            if !h.starts_with(&prev) {
                return Err(format!("{id}: history was rewritten: {prev:?} -> {h:?}"));
            }
            if let Some(last) = prev.last() {
                if terminal(*last) && h.len() > prev.len() {
                    return Err(format!("{id}: left terminal state {last:?}"));
                }
            }
            let start = prev.len().saturating_sub(1);
            for pair in h[start..].windows(2) {
                if !legal(pair[0], pair[1]) {
                    return Err(format!("{id}: illegal transition {:?} -> {:?}", pair[0], pair[1]));
                }
                stats.transitions += 1;
                stats.reached.insert((pair[0], pair[1]));
            }
            if s.level_at_request == ServiceLevel::Unconditional
                && h.iter()
                    .any(|x| matches!(x, SessionState::Pending | SessionState::Rejected))
            {
                return Err(format!("{id}: unconditional session passed through {h:?}"));
            }
            if s.state == SessionState::Ended {
                return Err(format!("{id}: left in Ended after an operation"));
            }
            let settles = h.iter().filter(|x| **x == SessionState::Settled).count();
            let ends = h.iter().filter(|x| **x == SessionState::Ended).count();
            if settles > 1 || settles != ends {
                return Err(format!("{id}: ended {ends} times and settled {settles} times"));
            }
            if (s.state == SessionState::Settled) != self.w.p.state().ledger().receipt(id).is_some() {
                return Err(format!("{id}: receipt presence disagrees with state"));
            }
            if s.state == SessionState::Pending && s.response_deadline.is_some_and(|d| now > d) {
                // overdue sessions only fire on the next operation
                let due = s.requested_at + cfg.pending_timeout_s;
                if s.response_deadline != Some(due) {
                    return Err(format!("{id}: response deadline is not requested_at + 60"));
                }
            }
            if s.state == SessionState::Expired
                && h.contains(&SessionState::Pending)
                && !h.contains(&SessionState::Accepted)
                && s.closed_at != Some(s.requested_at + cfg.pending_timeout_s)
            {
                return Err(format!(
                    "{id}: conditional expiry at {:?}, not requested_at + 60",
                    s.closed_at
                ));
            }
            if s.state == SessionState::Expired
                && h[0] == SessionState::Scheduled
                && !h.contains(&SessionState::Accepted)
            {
                let appt = self
                    .w
                    .p
                    .appointment_of(s)
                    .ok_or("scheduled session without appointment")?;
                if s.closed_at != Some(appt.slot_start + cfg.appointment_grace_s) {
                    return Err(format!("{id}: no-show expiry at {:?}, not slot + 120", s.closed_at));
                }
            }
            if s.state == SessionState::Settled && prev.last() != Some(&SessionState::Settled) {
                stats.settled += 1;
            }
            self.histories.insert(id.clone(), h.clone());
        }
        self.w.p.state().check_conservation()
    }
}

/// One random operation/tick trace checked against [`LEGAL`].
pub fn automaton_trace(seed: u64, ops: usize, stats: &mut AutomatonStats) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Trace::new(&mut rng);
    for i in 0..ops {
        t.step(&mut rng, stats)
            .map_err(|e| format!("seed {seed} op {i}: {e}"))?;
    }
    stats.traces += 1;
    check_replay(&t.w.p).map_err(|e| format!("seed {seed}: {e}"))
}

/// Registers a random sequence of accounts over a few fingerprints and checks
/// the cap after every attempt.
pub fn fraud_cap_run(cap: u32, fingerprints: &[u8]) -> Result<(), String> {
    let config = Config {
        max_accounts_per_fingerprint: cap,
        ..Config::default()
    };
    let mut w = World::new(config);
    let mut model: BTreeMap<u8, u32> = BTreeMap::new();
    for (i, fp) in fingerprints.iter().enumerate() {
        let raw = format!("card-{fp}");
        let before = *model.get(fp).unwrap_or(&0);
        match w.p.register_account(&format!("user{i}"), &raw) {
            Ok(_) if before < cap => {
                model.insert(*fp, before + 1);
            }
            Ok(_) => return Err(format!("account {} on {raw} exceeds cap {cap}", before + 1)),
            Err(e) if before >= cap && e.code() == "ExcessiveAccounts" => {}
            Err(e) => return Err(format!("registration {i} on {raw} failed with {}", e.code())),
        }
        let mut actual: BTreeMap<&str, u32> = BTreeMap::new();
        for a in w.p.state().registry().accounts() {
            *actual.entry(a.fingerprint.as_str()).or_default() += 1;
        }
        if let Some((fp, n)) = actual.iter().find(|(_, n)| **n > cap) {
            return Err(format!("{fp} has {n} accounts, cap {cap}"));
        }
    }
    check_replay(&w.p)
}

#[derive(Debug, Default)]
pub struct TestCatalog {
    pub listings: BTreeMap<ListingId, ServiceListing>,
    pub levels: BTreeMap<ListingId, ServiceLevel>,
    pub tallies: BTreeMap<AccountId, StarTally>,
}

impl Catalog for TestCatalog {
    fn listing(&self, id: &ListingId) -> Option<&ServiceListing> {
        self.listings.get(id)
    }

    fn level_at(&self, id: &ListingId, _t: Timestamp) -> Option<ServiceLevel> {
        self.levels.get(id).copied()
    }

    fn seller_tally(&self, seller: &AccountId) -> StarTally {
        self.tallies.get(seller).copied().unwrap_or_default()
    }
}

impl TestCatalog {
    pub fn index(&self) -> MatchIndex {
        let mut idx = MatchIndex::new();
        for l in self.listings.values() {
            idx.index_listing(l);
        }
        idx
    }
}

pub const VOCAB: &[&str] = &[
    "plumbing", "leak", "pipe", "tax", "return", "guitar", "lesson", "chord", "resume", "review", "python", "bug",
    "garden", "soil", "legal", "lease",
];

fn words(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    (0..rng.gen_range(lo..=hi))
        .map(|_| VOCAB.choose(rng).unwrap().to_string())
        .collect()
}

pub fn random_catalog(rng: &mut ChaCha8Rng) -> TestCatalog {
    let n = rng.gen_range(1..=50);
    let sellers = rng.gen_range(1..=n.min(12));
    let mut c = TestCatalog::default();
    for s in 0..sellers {
        let id = AccountId::nth(s as u64 + 1);
        if rng.gen_ratio(3, 4) {
            let count = rng.gen_range(1..=20u64);
            let sum = (0..count).map(|_| rng.gen_range(1..=5u64)).sum();
            c.tallies.insert(id, StarTally { sum, count });
        }
    }
    for i in 0..n {
        let id = ListingId::nth(i as u64 + 1);
        let rate = if rng.gen_ratio(1, 6) {
            Rate::per_case(rng.gen_range(1..=5_000))
        } else {
            Rate::per_minute(rng.gen_range(1..=1_000))
        };
        let listing = ServiceListing {
            listing_id: id.clone(),
            seller_id: AccountId::nth(rng.gen_range(0..sellers) as u64 + 1),
            title: words(rng, 1, 4).join(" "),
            description: words(rng, 0, 8).join(" "),
            tags: words(rng, 0, 3).into_iter().collect(),
            rate,
            active: true,
            created_at: Timestamp::SIM_EPOCH,
        };
        if !rng.gen_ratio(1, 8) {
            let level = *[
                ServiceLevel::Unconditional,
                ServiceLevel::Conditional,
                ServiceLevel::ByAppointment,
            ]
            .choose(rng)
            .unwrap();
            c.levels.insert(id.clone(), level);
        }
        c.listings.insert(id, listing);
    }
    c
}

pub fn random_query(rng: &mut ChaCha8Rng) -> MatchQuery {
    let mut q = words(rng, 1, 3);
    if rng.gen_ratio(1, 5) {
        q.push("unmatched".into());
    }
    MatchQuery {
        text: q.join(" "),
        max_results: 100,
        max_price: rng.gen_ratio(1, 4).then(|| Money::cents(rng.gen_range(1..=1_000))),
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> MatchWeights {
    if rng.gen_ratio(1, 3) {
        return MatchWeights::default();
    }
    let mut w = MatchWeights {
        lexical: rng.gen_range(0.0..1.0),
        reputation: rng.gen_range(0.0..1.0),
        price: rng.gen_range(0.0..1.0),
        availability: rng.gen_range(0.0..1.0),
    };
    if rng.gen_ratio(1, 6) {
        w.price = 0.0;
    }
    w
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Brute-force scores: (listing, total score) sorted best first.
pub fn oracle_scores(c: &TestCatalog, q: &MatchQuery, w: &MatchWeights) -> Vec<(ListingId, f64)> {
    let docs: BTreeMap<&ListingId, Vec<String>> = c
        .listings
        .values()
        .filter(|l| l.active)
        .map(|l| {
            let mut t = tokens(&l.title);
            t.extend(tokens(&l.description));
            for tag in &l.tags {
                t.extend(tokens(tag));
            }
            (&l.listing_id, t)
        })
        .collect();
    let n = docs.len() as f64;
    let avg = docs.values().map(|d| d.len() as f64).sum::<f64>() / n.max(1.0);
    let terms: BTreeSet<String> = tokens(&q.text).into_iter().collect();
    let (k1, b) = (1.2, 0.75);
    let bm25 = |doc: &[String]| -> f64 {
        terms
            .iter()
            .map(|t| {
                let tf = doc.iter().filter(|x| *x == t).count() as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                let df = docs.values().filter(|d| d.contains(t)).count() as f64;
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * doc.len() as f64 / avg))
            })
            .sum()
    };
    let price_ok = |l: &ServiceListing| match (l.rate, q.max_price) {
        (_, None) => true,
        (Rate::PerMinute { per_minute }, Some(m)) => per_minute <= m,
        (Rate::PerCase { per_case }, Some(m)) => per_case <= m,
    };
    let cands: Vec<(&ServiceListing, ServiceLevel, f64)> = docs
        .iter()
        .filter(|(_, d)| d.iter().any(|t| terms.contains(t)))
        .filter_map(|(id, d)| {
            let l = &c.listings[*id];
            let level = *c.levels.get(*id)?;
            price_ok(l).then(|| (l, level, bm25(d)))
        })
        .collect();
    let max_raw = cands.iter().map(|c| c.2).fold(0.0, f64::max);
    let hourly = |r: Rate| match r {
        Rate::PerMinute { per_minute } => Some(per_minute.amount() as f64 * 60.0),
        Rate::PerCase { .. } => None,
    };
    let max_hourly = cands.iter().filter_map(|c| hourly(c.0.rate)).fold(0.0, f64::max);
    let total = w.lexical + w.reputation + w.price + w.availability;
    let mut out: Vec<(ListingId, f64)> = cands
        .iter()
        .map(|(l, level, raw)| {
            let lexical = if max_raw > 0.0 { raw / max_raw } else { 0.0 };
            let tally = c.tallies.get(&l.seller_id).copied().unwrap_or_default();
            let reputation = if tally.count == 0 {
                0.5
            } else {
                (tally.sum as f64 / tally.count as f64 - 1.0) / 4.0
            };
            let price = match hourly(l.rate) {
                None => 0.5,
                Some(_) if max_hourly == 0.0 => 1.0,
                Some(h) => 1.0 - h / max_hourly,
            };
            let availability = match level {
                ServiceLevel::Unconditional => 1.0,
                ServiceLevel::Conditional => 0.6,
                ServiceLevel::ByAppointment => 0.3,
            };
            let score =
                (w.lexical * lexical + w.reputation * reputation + w.price * price + w.availability * availability)
                    / total;
            (l.listing_id.clone(), score)
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Scores may differ from the oracle by rounding; order may differ only
/// between results the oracle scores within this distance.
pub const SCORE_TOLERANCE: f64 = 1e-6;

pub fn check_against_oracle(c: &TestCatalog, q: &MatchQuery, w: &MatchWeights) -> Result<(), String> {
    let idx = c.index();
    let got = match idx.search(q, Timestamp::SIM_EPOCH, c, w) {
        Ok(r) => r,
        Err(e) => return Err(format!("search failed: {e}")),
    };
    let want = oracle_scores(c, q, w);
    if got.len() != want.len() {
        return Err(format!("{} results, oracle has {}", got.len(), want.len()));
    }
    let oracle: BTreeMap<&ListingId, f64> = want.iter().map(|(id, s)| (id, *s)).collect();
    for (i, r) in got.iter().enumerate() {
        let Some(&expect) = oracle.get(&r.listing_id) else {
            return Err(format!("{} is not an oracle candidate", r.listing_id));
        };
        if (r.total_score - expect).abs() > SCORE_TOLERANCE {
            return Err(format!("{} scored {} vs oracle {expect}", r.listing_id, r.total_score));
        }
        if r.rank as usize != i + 1 {
            return Err(format!("rank {} at position {}", r.rank, i + 1));
        }
        let (oid, oscore) = &want[i];
        if *oid != r.listing_id && (expect - oscore).abs() > SCORE_TOLERANCE {
            return Err(format!(
                "position {}: {} ({expect}) vs oracle {oid} ({oscore})",
                i + 1,
                r.listing_id
            ));
        }
    }
    Ok(())
}

/// Multiplying every weight by a positive constant leaves the ranking unchanged.
pub fn check_weight_scaling(c: &TestCatalog, q: &MatchQuery, w: &MatchWeights, k: f64) -> Result<(), String> {
    let idx = c.index();
    let scaled = MatchWeights {
        lexical: w.lexical * k,
        reputation: w.reputation * k,
        price: w.price * k,
        availability: w.availability * k,
    };
    let a: Vec<ListingId> = idx
        .search(q, Timestamp::SIM_EPOCH, c, w)
        .unwrap()
        .into_iter()
        .map(|r| r.listing_id)
        .collect();
    let b: Vec<ListingId> = idx
        .search(q, Timestamp::SIM_EPOCH, c, &scaled)
        .unwrap()
        .into_iter()
        .map(|r| r.listing_id)
        .collect();
    if a != b {
        return Err(format!("scaling weights by {k} reordered {a:?} into {b:?}"));
    }
    Ok(())
}

/// Raising one seller's average rating never lowers that seller's listings' ranks.
pub fn check_rating_monotonicity(
    c: &mut TestCatalog,
    q: &MatchQuery,
    w: &MatchWeights,
    rng: &mut ChaCha8Rng,
) -> Result<(), String> {
    let idx = c.index();
    let before = idx.search(q, Timestamp::SIM_EPOCH, &*c, w).unwrap();
    let Some(target) = before.choose(rng).map(|r| r.seller_id.clone()) else {
        return Ok(());
    };
    let old = c.tallies.get(&target).copied().unwrap_or_default();
    let raised = if old.count == 0 {
        StarTally {
            sum: rng.gen_range(3..=5),
            count: 1,
        }
    } else if old.sum == 5 * old.count {
        return Ok(());
    } else {
        StarTally {
            sum: old.sum + 5 * rng.gen_range(1..=3),
            count: old.count + rng.gen_range(1..=3),
        }
    };
    if old.count > 0 && raised.cmp_average(&old) != Some(std::cmp::Ordering::Greater) {
        return Ok(());
    }
    c.tallies.insert(target.clone(), raised);
    let after = idx.search(q, Timestamp::SIM_EPOCH, &*c, w).unwrap();
    let rank = |rs: &[burst_market::matching::MatchResult], id: &ListingId| {
        rs.iter().find(|r| &r.listing_id == id).map(|r| r.rank)
    };
    for r in before.iter().filter(|r| r.seller_id == target) {
        let (b, a) = (rank(&before, &r.listing_id), rank(&after, &r.listing_id));
        if a > b {
            return Err(format!(
                "{} fell from rank {b:?} to {a:?} after a better rating",
                r.listing_id
            ));
        }
    }
    Ok(())
}

/// One catalog: oracle agreement, weight scaling and rating monotonicity.
pub fn matching_catalog_check(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = random_catalog(&mut rng);
    for _ in 0..3 {
        let q = random_query(&mut rng);
        let w = random_weights(&mut rng);
        check_against_oracle(&c, &q, &w).map_err(|e| format!("seed {seed} {q:?}: {e}"))?;
        for k in [1e-3, 0.5, 3.0, 1_000.0] {
            check_weight_scaling(&c, &q, &w, k).map_err(|e| format!("seed {seed}: {e}"))?;
        }
        check_rating_monotonicity(&mut c, &q, &w, &mut rng).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok(())
}

pub fn drain(rx: &mut tokio::sync::mpsc::UnboundedReceiver<ChannelFrame>) -> Vec<ChannelFrame> {
    let mut out = Vec::new();
    while let Ok(f) = rx.try_recv() {
        out.push(f);
    }
    out
}

#[derive(Debug)]
pub struct MeterRun {
    pub metered_seconds: u64,
    pub charge: u64,
    pub end_reason: String,
    pub last_meter: Option<ChannelFrame>,
    pub ended: Option<ChannelFrame>,
    pub ended_at_offset: u64,
}

/// Drives a live channel second by second on a simulated clock. Both parties
/// send 1 Hz keepalive frames; the seller goes quiet after `seller_quiet_after`
/// seconds when set. The buyer hangs up after `talk` seconds if the session
/// is still live.
pub fn metering_run(per_minute: u64, talk: u64, seller_quiet_after: Option<u64>) -> Result<MeterRun, String> {
    let mut w = World::new(Config::default());
    let seller = w.account("sam");
    let buyer = w.account("bo");
    let lid = w.listing(
        &seller,
        "plumbing",
        Rate::per_minute(per_minute),
        ServiceLevel::Unconditional,
        86_400,
    );
    let sid = w.p.request_session(&buyer, &lid).map_err(|e| e.to_string())?.session_id;
    let clock = w.clock.clone();
    let mut g = Gateway::new(w.p);
    let mut b = g.hub.open(&mut g.platform, &sid, &buyer).map_err(|e| e.message)?;
    let mut s = g.hub.open(&mut g.platform, &sid, &seller).map_err(|e| e.message)?;
    let started = g
        .platform
        .session(&sid)
        .unwrap()
        .started_at
        .ok_or("not live after both joined")?;
    let mut frames = Vec::new();
    let keepalive = r#"{"frame_type":"chat","body":{"text":"."}}"#;
    for sec in 1..=talk {
        clock.advance(1);
        if g.platform.session(&sid).unwrap().state != SessionState::Live {
            break;
        }
        g.hub
            .inbound(&mut g.platform, &sid, Party::Buyer, keepalive)
            .map_err(|e| e.message)?;
        if seller_quiet_after.is_none_or(|q| sec <= q) {
            g.hub
                .inbound(&mut g.platform, &sid, Party::Seller, keepalive)
                .map_err(|e| e.message)?;
        }
        g.pump();
        frames.extend(drain(&mut b.frames));
        drain(&mut s.frames);
    }
    if g.platform.session(&sid).unwrap().state == SessionState::Live {
        g.platform.end_session(&buyer, &sid).map_err(|e| e.to_string())?;
        g.hub.dispatch(&mut g.platform);
    }
    frames.extend(drain(&mut b.frames));
    let session = g.platform.session(&sid).unwrap().clone();
    let receipt = g.platform.receipt(&sid).map_err(|e| e.to_string())?;
    check_replay(&g.platform)?;
    let last_meter = frames.iter().rev().find(|f| f.frame_type == FrameType::Meter).cloned();
    Ok(MeterRun {
        metered_seconds: session.metered_seconds,
        charge: receipt.charge.amount(),
        end_reason: format!("{:?}", session.end_reason.unwrap()),
        last_meter,
        ended: frames.iter().find(|f| f.frame_type == FrameType::Ended).cloned(),
        ended_at_offset: session.ended_at.unwrap().secs_since(started),
    })
}
