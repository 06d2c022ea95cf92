//! Burst Market: a marketplace where sellers offer short live conversations
//! at their own per-minute or per-case prices, and buyers find, call, pay
//! and rate them.
//!
//! All state is event-sourced through [`platform::Platform`]; the gateway,
//! CLI, scenario runner and C interface are thin layers over it.

pub mod billing;
pub mod cli;
pub mod command;
pub mod econometrics;
pub mod gateway;
pub mod kernel;
pub mod matching;
pub mod persistence;
pub mod platform;
pub mod registry;
pub mod reputation;
pub mod scenario;
pub mod session;
