//! Buyer ratings of settled sessions and exact per-seller aggregates.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{AccountId, SessionId, Timestamp};
use crate::session::{Session, SessionState};

pub const MAX_REVIEW_CHARS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum ReputationError {
    #[error("session {0} is not settled yet")]
    NotSettled(SessionId),
    #[error("only the session's buyer may rate it")]
    NotYourSession,
    #[error("session {0} already has a rating")]
    DuplicateRating(SessionId),
    #[error("stars must be between 1 and 5, got {0}")]
    StarsOutOfRange(u32),
    #[error("review exceeds {MAX_REVIEW_CHARS} characters")]
    ReviewTooLong,
}

impl ReputationError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub session_id: SessionId,
    pub rater_id: AccountId,
    pub seller_id: AccountId,
    pub stars: u8,
    pub review: String,
    pub created_at: Timestamp,
}

/// Exact average as `sum / count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StarTally {
    pub sum: u64,
    pub count: u64,
}

impl StarTally {
    pub fn add(&mut self, stars: u8) {
        self.sum += stars as u64;
        self.count += 1;
    }

    pub fn average(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum as f64 / self.count as f64)
    }

    /// Compares two averages exactly by cross-multiplication. Empty tallies compare as `None`.
    pub fn cmp_average(&self, other: &StarTally) -> Option<Ordering> {
        if self.count == 0 || other.count == 0 {
            return None;
        }
        Some((self.sum as u128 * other.count as u128).cmp(&(other.sum as u128 * self.count as u128)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SellerSummary {
    pub seller_id: AccountId,
    pub rating_count: u64,
    pub star_sum: u64,
    pub avg_stars: Option<f64>,
}

impl SellerSummary {
    fn from_tally(seller_id: AccountId, tally: StarTally) -> Self {
        SellerSummary {
            seller_id,
            rating_count: tally.count,
            star_sum: tally.sum,
            avg_stars: tally.average(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reputation {
    ratings: BTreeMap<SessionId, Rating>,
    tallies: BTreeMap<AccountId, StarTally>,
}

impl Reputation {
    pub fn new() -> Self {
        Reputation::default()
    }

    pub fn prepare_rating(
        &self,
        rater: &AccountId,
        session: &Session,
        stars: u32,
        review: &str,
        now: Timestamp,
    ) -> Result<Rating, ReputationError> {
        if &session.buyer_id != rater {
            return Err(ReputationError::NotYourSession);
        }
        if session.state != SessionState::Settled {
            return Err(ReputationError::NotSettled(session.session_id.clone()));
        }
        if self.ratings.contains_key(&session.session_id) {
            return Err(ReputationError::DuplicateRating(session.session_id.clone()));
        }
        if !(1..=5).contains(&stars) {
            return Err(ReputationError::StarsOutOfRange(stars));
        }
        if review.chars().count() > MAX_REVIEW_CHARS {
            return Err(ReputationError::ReviewTooLong);
        }
        Ok(Rating {
            session_id: session.session_id.clone(),
            rater_id: rater.clone(),
            seller_id: session.seller_id.clone(),
            stars: stars as u8,
            review: review.to_owned(),
            created_at: now,
        })
    }

    /// Stores the rating and folds it into the seller tally together.
    pub fn insert(&mut self, rating: Rating) {
        self.tallies
            .entry(rating.seller_id.clone())
            .or_default()
            .add(rating.stars);
        self.ratings.insert(rating.session_id.clone(), rating);
    }

    pub fn rate_session(
        &mut self,
        rater: &AccountId,
        session: &Session,
        stars: u32,
        review: &str,
        now: Timestamp,
    ) -> Result<Rating, ReputationError> {
        let rating = self.prepare_rating(rater, session, stars, review, now)?;
        self.insert(rating.clone());
        Ok(rating)
    }

    pub fn tally(&self, seller: &AccountId) -> StarTally {
        self.tallies.get(seller).copied().unwrap_or_default()
    }

    pub fn summary(&self, seller: &AccountId) -> SellerSummary {
        SellerSummary::from_tally(seller.clone(), self.tally(seller))
    }

    pub fn rating(&self, session: &SessionId) -> Option<&Rating> {
        self.ratings.get(session)
    }

    pub fn ratings(&self) -> impl Iterator<Item = &Rating> {
        self.ratings.values()
    }

    pub fn ratings_for(&self, seller: &AccountId) -> impl Iterator<Item = &Rating> {
        let seller = seller.clone();
        self.ratings.values().filter(move |r| r.seller_id == seller)
    }
}
