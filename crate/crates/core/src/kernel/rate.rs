use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Money;

/// Largest accepted price component, one million dollars.
pub const MAX_PRICE: Money = Money::cents(100_000_000);

/// How a listing charges for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Rate {
    /// Priced per 60 seconds, billed by the second.
    PerMinute { per_minute: Money },
    /// Flat fee for the whole session.
    PerCase { per_case: Money },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("price {0} exceeds the maximum of {MAX_PRICE}")]
pub struct RateTooLarge(pub Money);

impl Rate {
    pub const fn per_minute(cents: u64) -> Self {
        Rate::PerMinute {
            per_minute: Money::cents(cents),
        }
    }

    pub const fn per_case(cents: u64) -> Self {
        Rate::PerCase {
            per_case: Money::cents(cents),
        }
    }

    pub fn validate(&self) -> Result<(), RateTooLarge> {
        let price = match *self {
            Rate::PerMinute { per_minute } => per_minute,
            Rate::PerCase { per_case } => per_case,
        };
        if price > MAX_PRICE {
            return Err(RateTooLarge(price));
        }
        Ok(())
    }
}

/// Commission in basis points, `0..=10000`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct CommissionBps(u16);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("commission {0} bps is outside 0..=10000")]
pub struct BpsOutOfRange(pub u32);

impl CommissionBps {
    pub const ZERO: CommissionBps = CommissionBps(0);
    pub const FULL: CommissionBps = CommissionBps(10_000);

    pub fn new(bps: u32) -> Result<Self, BpsOutOfRange> {
        if bps > 10_000 {
            Err(BpsOutOfRange(bps))
        } else {
            Ok(CommissionBps(bps as u16))
        }
    }

    pub const fn get(self) -> u32 {
        self.0 as u32
    }
}

impl TryFrom<u32> for CommissionBps {
    type Error = BpsOutOfRange;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        CommissionBps::new(v)
    }
}

impl From<CommissionBps> for u32 {
    fn from(v: CommissionBps) -> u32 {
        v.get()
    }
}

/// Charge for `metered_seconds` of service.
///
/// Per-minute rates prorate to the second and round half up to the cent.
/// Flat rates ignore duration.
pub fn compute_charge(rate: Rate, metered_seconds: u64) -> Money {
    match rate {
        Rate::PerMinute { per_minute } => {
            let scaled = per_minute.amount() as u128 * metered_seconds as u128;
            // round(scaled / 60) with halves rounding up
            let rounded = (2 * scaled + 60) / 120;
            Money::cents(u64::try_from(rounded).unwrap_or(u64::MAX))
        }
        Rate::PerCase { per_case } => per_case,
    }
}

/// Platform's floor share and the seller's remainder. The parts always sum to `charge`.
pub fn split_commission(charge: Money, bps: CommissionBps) -> (Money, Money) {
    let platform = (charge.amount() as u128 * bps.get() as u128 / 10_000) as u64;
    let platform = Money::cents(platform);
    (platform, charge.saturating_sub(platform))
}

/// Per-minute price expressed per hour. Undefined for flat pricing.
pub fn normalized_hourly_rate(rate: Rate) -> Option<Money> {
    match rate {
        Rate::PerMinute { per_minute } => Some(Money::cents(per_minute.amount().saturating_mul(60))),
        Rate::PerCase { .. } => None,
    }
}
