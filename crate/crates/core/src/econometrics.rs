//! Per-transaction cost instrumentation (search, bargaining, enforcement)
//! and the seller income calculators.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{split_commission, CommissionBps, Money, SessionId};

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum EconError {
    #[error("trace violates an invariant: {0}")]
    InvariantViolation(String),
}

impl EconError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SearchCost {
    pub query_count: u32,
    /// Seconds from the first search to the session request.
    pub time_to_select: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BargainingCost {
    /// Always zero: prices are posted, never negotiated.
    pub negotiation_steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EnforcementCost {
    pub escrow_used: bool,
    pub rating_posted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransactionTrace {
    pub session_id: SessionId,
    pub search_cost: SearchCost,
    pub bargaining_cost: BargainingCost,
    pub enforcement_cost: EnforcementCost,
}

impl TransactionTrace {
    pub fn validate(&self) -> Result<(), EconError> {
        if self.bargaining_cost.negotiation_steps != 0 {
            return Err(EconError::InvariantViolation(
                "negotiation_steps must be 0 in a posted-price market".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBucket {
    pub bucket: String,
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn bucket(name: &str, mut values: Vec<f64>) -> MetricBucket {
    values.sort_by(f64::total_cmp);
    let count = values.len();
    let mean = if count == 0 {
        0.0
    } else {
        values.iter().sum::<f64>() / count as f64
    };
    MetricBucket {
        bucket: name.to_owned(),
        count,
        mean,
        p50: percentile(&values, 50.0),
        p95: percentile(&values, 95.0),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStore {
    traces: BTreeMap<SessionId, TransactionTrace>,
}

impl TraceStore {
    pub fn new() -> Self {
        TraceStore::default()
    }

    /// Stores or replaces the session's trace.
    pub fn record(&mut self, trace: TransactionTrace) -> Result<(), EconError> {
        trace.validate()?;
        self.traces.insert(trace.session_id.clone(), trace);
        Ok(())
    }

    pub fn get(&self, session: &SessionId) -> Option<&TransactionTrace> {
        self.traces.get(session)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn traces(&self) -> impl Iterator<Item = &TransactionTrace> {
        self.traces.values()
    }

    pub fn aggregates(&self) -> Vec<MetricBucket> {
        let col = |f: fn(&TransactionTrace) -> f64| self.traces.values().map(f).collect::<Vec<_>>();
        vec![
            bucket("search.query_count", col(|t| t.search_cost.query_count as f64)),
            bucket("search.time_to_select_s", col(|t| t.search_cost.time_to_select as f64)),
            bucket(
                "bargaining.negotiation_steps",
                col(|t| t.bargaining_cost.negotiation_steps as f64),
            ),
            bucket("enforcement.escrow_used", col(|t| flag(t.enforcement_cost.escrow_used))),
            bucket(
                "enforcement.rating_posted",
                col(|t| flag(t.enforcement_cost.rating_posted)),
            ),
        ]
    }
}

pub fn aggregates_csv(buckets: &[MetricBucket]) -> String {
    let mut out = String::from("bucket,count,mean,p50,p95\n");
    for b in buckets {
        let _ = writeln!(out, "{},{},{},{},{}", b.bucket, b.count, b.mean, b.p50, b.p95);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncomeScenario {
    pub per_minute: Money,
    pub minutes_per_day: u64,
    pub days: u64,
    pub commission_bps: CommissionBps,
}

/// One day's earnings after the platform's floor commission on that day's gross.
pub fn daily_net(s: &IncomeScenario) -> Money {
    let gross = Money::cents(s.per_minute.amount().saturating_mul(s.minutes_per_day));
    split_commission(gross, s.commission_bps).1
}

/// Seller net over `s.days` days.
pub fn annual_income(s: &IncomeScenario) -> Money {
    Money::cents(daily_net(s).amount().saturating_mul(s.days))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Recoup {
    Days(u64),
    Never,
}

/// Fewest whole days whose cumulative net covers `loan`. `s.days` is ignored.
pub fn days_to_recoup(loan: Money, s: &IncomeScenario) -> Recoup {
    if loan == Money::ZERO {
        return Recoup::Days(0);
    }
    let per_day = daily_net(s).amount();
    if per_day == 0 {
        return Recoup::Never;
    }
    Recoup::Days(loan.amount().div_ceil(per_day))
}
