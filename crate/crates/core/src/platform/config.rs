use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{CommissionBps, Money};
use crate::matching::MatchWeights;
use crate::session::SessionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Deployment settings, read from a JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen_addr: String,
    pub commission_bps: CommissionBps,
    pub max_accounts_per_fingerprint: u32,
    pub hold_cap_minutes: u64,
    pub pending_timeout_s: u64,
    pub heartbeat_grace_s: u64,
    pub endowment_cents: u64,
    pub log_path: Option<PathBuf>,
    pub snapshot_every: u64,
    pub appointment_grace_s: u64,
    pub join_timeout_s: u64,
    pub seller_capacity: u32,
    pub slot_grid_s: u64,
    pub weights: MatchWeights,
    /// Seeds token generation. Unset means tokens come from the OS.
    pub seed: Option<u64>,
}

impl Default for Config {
    fn default() -> Self {
        let s = SessionConfig::default();
        Config {
            listen_addr: "127.0.0.1:8080".into(),
            commission_bps: CommissionBps::new(2000).expect("in range"),
            max_accounts_per_fingerprint: 1,
            hold_cap_minutes: s.hold_cap_minutes,
            pending_timeout_s: s.pending_timeout_s,
            heartbeat_grace_s: s.heartbeat_grace_s,
            endowment_cents: 10_000,
            log_path: None,
            snapshot_every: 1000,
            appointment_grace_s: s.appointment_grace_s,
            join_timeout_s: s.join_timeout_s,
            seller_capacity: s.seller_capacity,
            slot_grid_s: s.slot_grid_s,
            weights: MatchWeights::default(),
            seed: None,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_owned()));
        if self.max_accounts_per_fingerprint == 0 {
            return bad("max_accounts_per_fingerprint must be at least 1");
        }
        if self.seller_capacity == 0 {
            return bad("seller_capacity must be at least 1");
        }
        if self.hold_cap_minutes == 0 {
            return bad("hold_cap_minutes must be at least 1");
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be at least 1");
        }
        if self.weights.validate().is_err() {
            return bad("weights must be finite, non-negative and not all zero");
        }
        if self.listen_addr.parse::<std::net::SocketAddr>().is_err() {
            return bad("listen_addr must be host:port");
        }
        Ok(())
    }

    pub fn session(&self) -> SessionConfig {
        SessionConfig {
            seller_capacity: self.seller_capacity,
            pending_timeout_s: self.pending_timeout_s,
            appointment_grace_s: self.appointment_grace_s,
            join_timeout_s: self.join_timeout_s,
            heartbeat_grace_s: self.heartbeat_grace_s,
            slot_grid_s: self.slot_grid_s,
            hold_cap_minutes: self.hold_cap_minutes,
        }
    }

    pub fn endowment(&self) -> Money {
        Money::cents(self.endowment_cents)
    }
}
