//! Shared primitives: ids, integer money, rate arithmetic, clocks and the
//! event envelope.

mod clock;
mod event;
mod ids;
mod money;
mod rate;
mod time;

pub use clock::{Clock, SimClock, SystemClock};
pub use event::EventRecord;
pub use ids::{AccountId, AppointmentId, EntryId, HoldId, ListingId, SessionId, SettlementId, WindowId};
pub use money::{Money, CURRENCY};
pub use rate::{
    compute_charge, normalized_hourly_rate, split_commission, BpsOutOfRange, CommissionBps, Rate, RateTooLarge,
    MAX_PRICE,
};
pub use time::Timestamp;
