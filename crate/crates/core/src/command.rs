//! A serializable form of every platform operation, shared by the scenario
//! runner and the C interface.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use strum::VariantNames;

use crate::kernel::{AccountId, ListingId, Money, SessionId, Timestamp};
use crate::matching::{MatchQuery, DEFAULT_MAX_RESULTS};
use crate::platform::{Platform, PlatformError};
use crate::registry::{NewListing, WindowSpec};
use crate::session::Decision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, VariantNames)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
#[strum(serialize_all = "snake_case")]
pub enum Command {
    RegisterAccount {
        display_name: String,
        fingerprint: String,
    },
    CreateListing {
        title: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        tags: Vec<String>,
        rate: crate::kernel::Rate,
    },
    DeactivateListing {
        listing: ListingId,
    },
    SetAvailability {
        listing: ListingId,
        windows: Vec<WindowSpec>,
    },
    ListingDetail {
        listing: ListingId,
    },
    Search {
        q: String,
        #[serde(default)]
        max_price: Option<u64>,
        #[serde(default)]
        max_results: Option<usize>,
    },
    RequestSession {
        listing: ListingId,
    },
    Respond {
        session: SessionId,
        decision: Decision,
    },
    BookAppointment {
        listing: ListingId,
        slot_start: Timestamp,
    },
    CancelAppointment {
        session: SessionId,
    },
    Join {
        session: SessionId,
    },
    Heartbeat {
        session: SessionId,
    },
    EndSession {
        session: SessionId,
    },
    RateSession {
        session: SessionId,
        stars: u32,
        #[serde(default)]
        review: String,
    },
    Session {
        session: SessionId,
    },
    Receipt {
        session: SessionId,
    },
    Balance {
        #[serde(default)]
        account: Option<AccountId>,
    },
    Statement {
        #[serde(default)]
        account: Option<AccountId>,
        #[serde(default)]
        from: Option<Timestamp>,
        #[serde(default)]
        to: Option<Timestamp>,
    },
    SellerSummary {
        seller: AccountId,
    },
    TransactionCosts,
    Tick,
}

impl Command {
    pub fn is_action(name: &str) -> bool {
        Self::VARIANTS.contains(&name)
    }
}

fn to_json<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

/// Runs `cmd` as `actor`. Operations that act for an account need one.
pub fn execute(p: &mut Platform, actor: Option<&AccountId>, cmd: &Command) -> Result<Value, PlatformError> {
    let me = || actor.ok_or(PlatformError::Unauthenticated);
    Ok(match cmd {
        Command::RegisterAccount {
            display_name,
            fingerprint,
        } => to_json(p.register_account(display_name, fingerprint)?),
        Command::CreateListing {
            title,
            description,
            tags,
            rate,
        } => {
            let new = NewListing {
                title: title.clone(),
                description: description.clone(),
                tags: tags.clone(),
                rate: *rate,
            };
            to_json(p.create_listing(me()?, &new)?)
        }
        Command::DeactivateListing { listing } => to_json(p.deactivate_listing(me()?, listing)?),
        Command::SetAvailability { listing, windows } => to_json(p.set_availability(me()?, listing, windows)?),
        Command::ListingDetail { listing } => {
            p.tick()?;
            to_json(p.listing_detail(listing)?)
        }
        Command::Search {
            q,
            max_price,
            max_results,
        } => {
            let query = MatchQuery {
                text: q.clone(),
                max_results: max_results.unwrap_or(DEFAULT_MAX_RESULTS),
                max_price: max_price.map(Money::cents),
            };
            to_json(p.search(actor, &query)?)
        }
        Command::RequestSession { listing } => to_json(p.request_session(me()?, listing)?),
        Command::Respond { session, decision } => to_json(p.respond(me()?, session, *decision)?),
        Command::BookAppointment { listing, slot_start } => {
            let (appointment, session) = p.book_appointment(me()?, listing, *slot_start)?;
            json!({ "appointment": appointment, "session": session })
        }
        Command::CancelAppointment { session } => to_json(p.cancel_appointment(me()?, session)?),
        Command::Join { session } => to_json(p.join(me()?, session)?),
        Command::Heartbeat { session } => to_json(p.heartbeat(me()?, session)?),
        Command::EndSession { session } => to_json(p.end_session(me()?, session)?),
        Command::RateSession { session, stars, review } => to_json(p.rate_session(me()?, session, *stars, review)?),
        Command::Session { session } => {
            p.tick()?;
            to_json(p.session(session)?)
        }
        Command::Receipt { session } => {
            p.tick()?;
            to_json(p.receipt(session)?)
        }
        Command::Balance { account } => {
            p.tick()?;
            let id = match account {
                Some(a) => a,
                None => me()?,
            };
            let b = p.balance(id)?;
            json!({ "account_id": id, "available": b.available, "held": b.held })
        }
        Command::Statement { account, from, to } => {
            p.tick()?;
            let id = match account {
                Some(a) => a,
                None => me()?,
            };
            let from = from.unwrap_or(Timestamp::from_unix(i64::MIN / 2));
            let to = to.unwrap_or(Timestamp::from_unix(i64::MAX / 2));
            to_json(p.statement(id, from, to)?)
        }
        Command::SellerSummary { seller } => to_json(p.seller_summary(seller)?),
        Command::TransactionCosts => to_json(p.transaction_costs()),
        Command::Tick => to_json(p.tick()?),
    })
}
