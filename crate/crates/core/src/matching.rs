//! Free-text search over active listings with a four-part explainable score.
//!
//! Each part is a fixed-point value in `[0, PART_SCALE]` and weights are
//! normalized to `WEIGHT_SCALE` units, so the ranking key is an exact integer
//! and ties break on listing id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{normalized_hourly_rate, AccountId, ListingId, Money, Rate, Timestamp};
use crate::registry::{ServiceLevel, ServiceListing};
use crate::reputation::StarTally;

pub const PART_SCALE: u64 = 1_000_000_000;
pub const WEIGHT_SCALE: u64 = 1_000_000;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_MAX_RESULTS: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum MatchError {
    #[error("query has no searchable words")]
    EmptyQuery,
    #[error("weights must be finite, non-negative and not all zero")]
    InvalidWeights,
}

impl MatchError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchWeights {
    pub lexical: f64,
    pub reputation: f64,
    pub price: f64,
    pub availability: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            lexical: 0.5,
            reputation: 0.25,
            price: 0.15,
            availability: 0.10,
        }
    }
}

impl MatchWeights {
    pub fn validate(&self) -> Result<(), MatchError> {
        let ws = self.as_array();
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(MatchError::InvalidWeights);
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 4] {
        [self.lexical, self.reputation, self.price, self.availability]
    }

    /// Weights rescaled to sum to one and rounded to `WEIGHT_SCALE` units.
    pub fn fixed_point(&self) -> [u64; 4] {
        let ws = self.as_array();
        let total: f64 = ws.iter().sum();
        ws.map(|w| (w / total * WEIGHT_SCALE as f64).round() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchQuery {
    pub text: String,
    #[serde(default = "default_max_results")]
    pub max_results: usize,
    /// Upper bound on the per-minute price, or on the flat fee for per-case listings.
    #[serde(default)]
    pub max_price: Option<Money>,
}

fn default_max_results() -> usize {
    DEFAULT_MAX_RESULTS
}

impl MatchQuery {
    pub fn new(text: impl Into<String>) -> Self {
        MatchQuery {
            text: text.into(),
            max_results: DEFAULT_MAX_RESULTS,
            max_price: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreParts {
    pub lexical: f64,
    pub reputation: f64,
    pub price: f64,
    pub availability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedParts {
    pub lexical: u64,
    pub reputation: u64,
    pub price: u64,
    pub availability: u64,
}

impl FixedParts {
    fn as_array(&self) -> [u64; 4] {
        [self.lexical, self.reputation, self.price, self.availability]
    }

    fn to_unit(self) -> ScoreParts {
        let f = |v: u64| v as f64 / PART_SCALE as f64;
        ScoreParts {
            lexical: f(self.lexical),
            reputation: f(self.reputation),
            price: f(self.price),
            availability: f(self.availability),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub listing_id: ListingId,
    pub seller_id: AccountId,
    pub title: String,
    pub rate: Rate,
    pub level: ServiceLevel,
    pub avg_stars: Option<f64>,
    pub total_score: f64,
    pub parts: ScoreParts,
    pub rank: u32,
    /// Exact ranking key: `Σ weight_units × part_units`.
    pub score_key: u128,
}

/// Read access to the catalog state scoring depends on.
pub trait Catalog {
    fn listing(&self, id: &ListingId) -> Option<&ServiceListing>;
    fn level_at(&self, id: &ListingId, t: Timestamp) -> Option<ServiceLevel>;
    fn seller_tally(&self, seller: &AccountId) -> StarTally;
}

pub fn availability_part(level: ServiceLevel) -> u64 {
    match level {
        ServiceLevel::Unconditional => PART_SCALE,
        ServiceLevel::Conditional => PART_SCALE / 10 * 6,
        ServiceLevel::ByAppointment => PART_SCALE / 10 * 3,
    }
}

/// `(avg - 1) / 4`, or one half for an unrated seller.
pub fn reputation_part(tally: StarTally) -> u64 {
    if tally.count == 0 {
        return PART_SCALE / 2;
    }
    let num = (tally.sum - tally.count) as u128 * PART_SCALE as u128;
    (num / (4 * tally.count as u128)) as u64
}

/// `1 - hourly / max_hourly`, one half for flat pricing.
pub fn price_part(rate: Rate, max_hourly: Money) -> u64 {
    match normalized_hourly_rate(rate) {
        None => PART_SCALE / 2,
        Some(_) if max_hourly == Money::ZERO => PART_SCALE,
        Some(hourly) => {
            let diff = max_hourly.amount().saturating_sub(hourly.amount()) as u128;
            (diff * PART_SCALE as u128 / max_hourly.amount() as u128) as u64
        }
    }
}

pub fn score_key(weights: [u64; 4], parts: &FixedParts) -> u128 {
    weights
        .iter()
        .zip(parts.as_array())
        .map(|(w, p)| *w as u128 * p as u128)
        .sum()
}

pub fn bm25_term(tf: f64, idf: f64, doc_len: f64, avg_doc_len: f64) -> f64 {
    let norm = 1.0 - BM25_B + BM25_B * doc_len / avg_doc_len.max(1e-9);
    idf * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * norm)
}

pub fn bm25_idf(docs: usize, df: usize) -> f64 {
    let (n, df) = (docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

fn price_allowed(rate: Rate, max_price: Option<Money>) -> bool {
    let Some(max) = max_price else { return true };
    match rate {
        Rate::PerMinute { per_minute } => per_minute <= max,
        Rate::PerCase { per_case } => per_case <= max,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct DocStats {
    terms: BTreeMap<String, u32>,
    len: u32,
}

/// Inverted index over active listings' title, description and tags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchIndex {
    docs: BTreeMap<ListingId, DocStats>,
    postings: BTreeMap<String, BTreeSet<ListingId>>,
    total_len: u64,
}

impl MatchIndex {
    pub fn new() -> Self {
        MatchIndex::default()
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn contains(&self, id: &ListingId) -> bool {
        self.docs.contains_key(id)
    }

    /// (Re)indexes a listing; inactive listings are dropped.
    pub fn index_listing(&mut self, listing: &ServiceListing) {
        self.remove(&listing.listing_id);
        if !listing.active {
            return;
        }
        let mut doc = DocStats::default();
        let text = [listing.title.as_str(), listing.description.as_str()];
        let tokens = text
            .into_iter()
            .flat_map(tokenize)
            .chain(listing.tags.iter().flat_map(|t| tokenize(t)));
        for tok in tokens {
            *doc.terms.entry(tok).or_default() += 1;
            doc.len += 1;
        }
        for term in doc.terms.keys() {
            self.postings
                .entry(term.clone())
                .or_default()
                .insert(listing.listing_id.clone());
        }
        self.total_len += doc.len as u64;
        self.docs.insert(listing.listing_id.clone(), doc);
    }

    pub fn remove(&mut self, id: &ListingId) {
        let Some(doc) = self.docs.remove(id) else {
            return;
        };
        self.total_len -= doc.len as u64;
        for term in doc.terms.keys() {
            if let Some(set) = self.postings.get_mut(term) {
                set.remove(id);
                if set.is_empty() {
                    self.postings.remove(term);
                }
            }
        }
    }

    /// Raw BM25 of one indexed listing against unique query terms.
    fn bm25(&self, id: &ListingId, terms: &[String]) -> f64 {
        let Some(doc) = self.docs.get(id) else {
            return 0.0;
        };
        let n = self.docs.len();
        let avg = self.total_len as f64 / n.max(1) as f64;
        terms
            .iter()
            .filter_map(|t| {
                let tf = *doc.terms.get(t)?;
                let df = self.postings.get(t).map_or(0, BTreeSet::len);
                Some(bm25_term(tf as f64, bm25_idf(n, df), doc.len as f64, avg))
            })
            .sum()
    }

    pub fn search(
        &self,
        query: &MatchQuery,
        now: Timestamp,
        catalog: &impl Catalog,
        weights: &MatchWeights,
    ) -> Result<Vec<MatchResult>, MatchError> {
        weights.validate()?;
        let terms: Vec<String> = tokenize(&query.text)
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if terms.is_empty() {
            return Err(MatchError::EmptyQuery);
        }
        let mut ids: BTreeSet<&ListingId> = BTreeSet::new();
        for t in &terms {
            if let Some(set) = self.postings.get(t) {
                ids.extend(set.iter());
            }
        }
        struct Candidate<'a> {
            listing: &'a ServiceListing,
            level: ServiceLevel,
            raw: f64,
            tally: StarTally,
        }
        let candidates: Vec<Candidate> = ids
            .into_iter()
            .filter_map(|id| {
                let listing = catalog.listing(id).filter(|l| l.active)?;
                let level = catalog.level_at(id, now)?;
                price_allowed(listing.rate, query.max_price).then(|| Candidate {
                    listing,
                    level,
                    raw: self.bm25(id, &terms),
                    tally: catalog.seller_tally(&listing.seller_id),
                })
            })
            .collect();
        let max_raw = candidates.iter().map(|c| c.raw).fold(0.0, f64::max);
        let max_hourly = candidates
            .iter()
            .filter_map(|c| normalized_hourly_rate(c.listing.rate))
            .max()
            .unwrap_or(Money::ZERO);
        let wfix = weights.fixed_point();
        let wsum: u64 = wfix.iter().sum();

        let mut scored: Vec<MatchResult> = candidates
            .into_iter()
            .map(|c| {
                let lexical = if max_raw > 0.0 {
                    ((c.raw / max_raw) * PART_SCALE as f64).round() as u64
                } else {
                    0
                };
                let parts = FixedParts {
                    lexical: lexical.min(PART_SCALE),
                    reputation: reputation_part(c.tally),
                    price: price_part(c.listing.rate, max_hourly),
                    availability: availability_part(c.level),
                };
                let key = score_key(wfix, &parts);
                MatchResult {
                    listing_id: c.listing.listing_id.clone(),
                    seller_id: c.listing.seller_id.clone(),
                    title: c.listing.title.clone(),
                    rate: c.listing.rate,
                    level: c.level,
                    avg_stars: c.tally.average(),
                    total_score: key as f64 / (wsum.max(1) as f64 * PART_SCALE as f64),
                    parts: parts.to_unit(),
                    rank: 0,
                    score_key: key,
                }
            })
            .collect();
        scored.sort_by(|a, b| {
            b.score_key
                .cmp(&a.score_key)
                .then_with(|| a.listing_id.cmp(&b.listing_id))
        });
        scored.truncate(query.max_results);
        for (i, r) in scored.iter_mut().enumerate() {
            r.rank = i as u32 + 1;
        }
        Ok(scored)
    }
}
