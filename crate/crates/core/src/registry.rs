//! Accounts with a per-instrument creation cap, service listings and
//! availability windows carrying service levels.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use strum::{IntoStaticStr, VariantNames};
use thiserror::Error;

use crate::kernel::{AccountId, ListingId, Rate, Timestamp, WindowId};

pub const MAX_TITLE_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Eq, Error, IntoStaticStr, VariantNames)]
pub enum RegistryError {
    #[error("financial instrument already backs the maximum of {cap} account(s)")]
    ExcessiveAccounts { cap: u32 },
    #[error("fingerprint must be a non-empty opaque string")]
    InvalidFingerprint,
    #[error("unknown seller {0}")]
    UnknownSeller(AccountId),
    #[error("unknown account {0}")]
    UnknownAccount(AccountId),
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("title must be 1..={MAX_TITLE_CHARS} characters")]
    InvalidTitle,
    #[error("unknown listing {0}")]
    UnknownListing(ListingId),
    #[error("listing {0} belongs to another seller")]
    NotListingOwner(ListingId),
    #[error("window must start before it ends")]
    InvalidWindow,
    #[error("availability windows overlap")]
    OverlappingWindows,
}

impl RegistryError {
    pub fn code(&self) -> &'static str {
        self.into()
    }
}

/// Stable salted hash of a registered payment instrument. Only equality is meaningful.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FinancialFingerprint(String);

impl FinancialFingerprint {
    pub fn new(raw: impl Into<String>) -> Result<Self, RegistryError> {
        let raw = raw.into();
        if raw.trim().is_empty() || raw.len() > 512 {
            return Err(RegistryError::InvalidFingerprint);
        }
        Ok(FinancialFingerprint(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: AccountId,
    pub display_name: String,
    pub fingerprint: FinancialFingerprint,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ServiceLevel {
    /// Real-time, the seller cannot decline.
    #[serde(rename = "L1", alias = "L1_Unconditional")]
    Unconditional,
    /// Real-time, the seller accepts or rejects each request.
    #[serde(rename = "L2", alias = "L2_Conditional")]
    Conditional,
    /// Booked slots only.
    #[serde(rename = "L3", alias = "L3_Appointment")]
    ByAppointment,
}

impl ServiceLevel {
    pub fn label(self) -> &'static str {
        match self {
            ServiceLevel::Unconditional => "L1",
            ServiceLevel::Conditional => "L2",
            ServiceLevel::ByAppointment => "L3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceListing {
    pub listing_id: ListingId,
    pub seller_id: AccountId,
    pub title: String,
    pub description: String,
    pub tags: BTreeSet<String>,
    pub rate: Rate,
    pub active: bool,
    pub created_at: Timestamp,
}

/// Caller-supplied listing fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewListing {
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub tags: Vec<String>,
    pub rate: Rate,
}

/// A half-open interval `[start, end)` during which a listing is offered at `level`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AvailabilityWindow {
    pub window_id: WindowId,
    pub listing_id: ListingId,
    pub start: Timestamp,
    pub end: Timestamp,
    pub level: ServiceLevel,
}

impl AvailabilityWindow {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub start: Timestamp,
    pub end: Timestamp,
    pub level: ServiceLevel,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    accounts: BTreeMap<AccountId, Account>,
    per_fingerprint: BTreeMap<FinancialFingerprint, u32>,
    listings: BTreeMap<ListingId, ServiceListing>,
    by_seller: BTreeMap<AccountId, BTreeSet<ListingId>>,
    windows: BTreeMap<ListingId, Vec<AvailabilityWindow>>,
    windows_issued: u64,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn prepare_account(
        &self,
        display_name: &str,
        fingerprint: &FinancialFingerprint,
        now: Timestamp,
        cap: u32,
    ) -> Result<Account, RegistryError> {
        let used = self.per_fingerprint.get(fingerprint).copied().unwrap_or(0);
        if used >= cap {
            return Err(RegistryError::ExcessiveAccounts { cap });
        }
        Ok(Account {
            account_id: AccountId::nth(self.accounts.len() as u64 + 1),
            display_name: display_name.to_owned(),
            fingerprint: fingerprint.clone(),
            created_at: now,
        })
    }

    /// Stores the account and bumps its fingerprint counter in the same step.
    pub fn insert_account(&mut self, account: Account) {
        *self.per_fingerprint.entry(account.fingerprint.clone()).or_default() += 1;
        self.accounts.insert(account.account_id.clone(), account);
    }

    pub fn register_account(
        &mut self,
        display_name: &str,
        fingerprint: &FinancialFingerprint,
        now: Timestamp,
        cap: u32,
    ) -> Result<Account, RegistryError> {
        let account = self.prepare_account(display_name, fingerprint, now, cap)?;
        self.insert_account(account.clone());
        Ok(account)
    }

    pub fn account(&self, id: &AccountId) -> Option<&Account> {
        self.accounts.get(id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn accounts_on(&self, fingerprint: &FinancialFingerprint) -> u32 {
        self.per_fingerprint.get(fingerprint).copied().unwrap_or(0)
    }

    pub fn prepare_listing(
        &self,
        seller_id: &AccountId,
        new: &NewListing,
        now: Timestamp,
    ) -> Result<ServiceListing, RegistryError> {
        if !self.accounts.contains_key(seller_id) {
            return Err(RegistryError::UnknownSeller(seller_id.clone()));
        }
        let title = new.title.trim();
        if title.is_empty() || title.chars().count() > MAX_TITLE_CHARS {
            return Err(RegistryError::InvalidTitle);
        }
        new.rate
            .validate()
            .map_err(|e| RegistryError::InvalidRate(e.to_string()))?;
        let tags = new
            .tags
            .iter()
            .map(|t| t.trim().to_lowercase())
            .filter(|t| !t.is_empty())
            .collect();
        Ok(ServiceListing {
            listing_id: ListingId::nth(self.listings.len() as u64 + 1),
            seller_id: seller_id.clone(),
            title: title.to_owned(),
            description: new.description.clone(),
            tags,
            rate: new.rate,
            active: true,
            created_at: now,
        })
    }

    pub fn insert_listing(&mut self, listing: ServiceListing) {
        self.by_seller
            .entry(listing.seller_id.clone())
            .or_default()
            .insert(listing.listing_id.clone());
        self.listings.insert(listing.listing_id.clone(), listing);
    }

    pub fn create_listing(
        &mut self,
        seller_id: &AccountId,
        new: &NewListing,
        now: Timestamp,
    ) -> Result<ServiceListing, RegistryError> {
        let listing = self.prepare_listing(seller_id, new, now)?;
        self.insert_listing(listing.clone());
        Ok(listing)
    }

    pub fn listing(&self, id: &ListingId) -> Option<&ServiceListing> {
        self.listings.get(id)
    }

    pub fn listings(&self) -> impl Iterator<Item = &ServiceListing> {
        self.listings.values()
    }

    pub fn listings_of(&self, seller: &AccountId) -> Vec<&ServiceListing> {
        self.by_seller
            .get(seller)
            .into_iter()
            .flatten()
            .filter_map(|id| self.listings.get(id))
            .collect()
    }

    /// Checks that `caller` owns `listing`.
    pub fn owned_listing(&self, caller: &AccountId, listing: &ListingId) -> Result<&ServiceListing, RegistryError> {
        let found = self
            .listings
            .get(listing)
            .ok_or_else(|| RegistryError::UnknownListing(listing.clone()))?;
        if &found.seller_id != caller {
            return Err(RegistryError::NotListingOwner(listing.clone()));
        }
        Ok(found)
    }

    /// Deactivated listings stay stored; only matching drops them.
    pub fn set_active(&mut self, listing: &ListingId, active: bool) -> Result<(), RegistryError> {
        let found = self
            .listings
            .get_mut(listing)
            .ok_or_else(|| RegistryError::UnknownListing(listing.clone()))?;
        found.active = active;
        Ok(())
    }

    /// Validates a replacement window set and assigns ids. Nothing is stored.
    pub fn prepare_windows(
        &self,
        listing: &ListingId,
        specs: &[WindowSpec],
    ) -> Result<Vec<AvailabilityWindow>, RegistryError> {
        if !self.listings.contains_key(listing) {
            return Err(RegistryError::UnknownListing(listing.clone()));
        }
        if specs.iter().any(|w| w.start >= w.end) {
            return Err(RegistryError::InvalidWindow);
        }
        let mut sorted: Vec<&WindowSpec> = specs.iter().collect();
        sorted.sort_by_key(|w| (w.start, w.end));
        if sorted.windows(2).any(|pair| pair[1].start < pair[0].end) {
            return Err(RegistryError::OverlappingWindows);
        }
        Ok(sorted
            .into_iter()
            .enumerate()
            .map(|(i, w)| AvailabilityWindow {
                window_id: WindowId::nth(self.windows_issued + i as u64 + 1),
                listing_id: listing.clone(),
                start: w.start,
                end: w.end,
                level: w.level,
            })
            .collect())
    }

    /// Replaces the listing's whole window set.
    pub fn replace_windows(&mut self, listing: &ListingId, windows: Vec<AvailabilityWindow>) {
        self.windows_issued += windows.len() as u64;
        if windows.is_empty() {
            self.windows.remove(listing);
        } else {
            self.windows.insert(listing.clone(), windows);
        }
    }

    pub fn set_availability(
        &mut self,
        listing: &ListingId,
        specs: &[WindowSpec],
    ) -> Result<Vec<AvailabilityWindow>, RegistryError> {
        let windows = self.prepare_windows(listing, specs)?;
        self.replace_windows(listing, windows.clone());
        Ok(windows)
    }

    pub fn windows(&self, listing: &ListingId) -> &[AvailabilityWindow] {
        self.windows.get(listing).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn window_at(&self, listing: &ListingId, t: Timestamp) -> Option<&AvailabilityWindow> {
        let windows = self.windows(listing);
        // windows are sorted by start and disjoint
        let idx = windows.partition_point(|w| w.start <= t);
        idx.checked_sub(1).map(|i| &windows[i]).filter(|w| w.contains(t))
    }

    pub fn level_at(&self, listing: &ListingId, t: Timestamp) -> Result<Option<ServiceLevel>, RegistryError> {
        if !self.listings.contains_key(listing) {
            return Err(RegistryError::UnknownListing(listing.clone()));
        }
        Ok(self.window_at(listing, t).map(|w| w.level))
    }
}
