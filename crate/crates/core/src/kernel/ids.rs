use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            pub fn new(id: impl Into<String>) -> Self {
                $name(id.into())
            }

            /// The `n`th id of this kind, e.g. `acct-7`.
            pub fn nth(n: u64) -> Self {
                $name(format!("{}-{}", $prefix, n))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }
    };
}

string_id!(
    /// Participant account. Every account can both buy and sell.
    AccountId,
    "acct"
);
string_id!(ListingId, "lst");
string_id!(WindowId, "win");
string_id!(SessionId, "ses");
string_id!(AppointmentId, "apt");
string_id!(HoldId, "hold");
string_id!(SettlementId, "stl");
string_id!(EntryId, "ent");

impl AccountId {
    /// The platform's own commission account.
    pub fn platform() -> Self {
        AccountId::new("platform")
    }
}

impl HoldId {
    pub fn for_session(session: &SessionId) -> Self {
        HoldId(format!("hold-{session}"))
    }
}

impl SettlementId {
    /// Settlement ids are a function of the session, which makes them the idempotency key.
    pub fn for_session(session: &SessionId) -> Self {
        SettlementId(format!("stl-{session}"))
    }
}
