use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use crate::platform::PlatformError;

/// Codes the gateway raises on its own.
pub const GATEWAY_CODES: &[&str] = &[
    "BadRequest",
    "NotFound",
    "ChannelRefused",
    "FrameTooLarge",
    "InvalidFrame",
];

/// Every error code that can reach a client, with its HTTP status.
pub const STATUS_TABLE: &[(&str, u16)] = &[
    // registry
    ("ExcessiveAccounts", 409),
    ("InvalidFingerprint", 422),
    ("UnknownSeller", 404),
    ("UnknownAccount", 404),
    ("InvalidRate", 422),
    ("InvalidTitle", 422),
    ("UnknownListing", 404),
    ("NotListingOwner", 403),
    ("InvalidWindow", 422),
    ("OverlappingWindows", 422),
    // sessions
    ("UnknownSession", 404),
    ("UnknownBuyer", 404),
    ("ListingInactive", 409),
    ("OwnListing", 422),
    ("SellerOffDuty", 409),
    ("AppointmentRequired", 409),
    ("SellerBusy", 409),
    ("NotPending", 409),
    ("NotYourSession", 403),
    ("DeadlinePassed", 409),
    ("SlotUnavailable", 409),
    ("SlotMisaligned", 422),
    ("NotL3Window", 409),
    ("NotJoinable", 409),
    ("JoinWindowClosed", 409),
    ("NotLive", 409),
    ("NotScheduled", 409),
    // billing
    ("InsufficientFunds", 402),
    ("DuplicateHold", 409),
    ("NotEnded", 409),
    ("NoOpenHold", 409),
    ("NoReceipt", 404),
    // reputation
    ("NotSettled", 409),
    ("DuplicateRating", 409),
    ("StarsOutOfRange", 422),
    ("ReviewTooLong", 422),
    // matching and metrics
    ("EmptyQuery", 422),
    ("InvalidWeights", 422),
    ("InvariantViolation", 422),
    // storage
    ("StorageFailure", 500),
    ("CorruptLog", 500),
    ("SeqOutOfRange", 422),
    // platform and gateway
    ("Unauthenticated", 401),
    ("Forbidden", 403),
    ("BadRequest", 400),
    ("NotFound", 404),
    ("ChannelRefused", 409),
    ("FrameTooLarge", 413),
    ("InvalidFrame", 422),
];

pub fn status_for(code: &str) -> u16 {
    STATUS_TABLE.iter().find(|(c, _)| *c == code).map_or(500, |(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub http_status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        ApiError {
            http_status: status_for(code),
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new("BadRequest", message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({}): {}", self.code, self.http_status, self.message)
    }
}

impl std::error::Error for ApiError {}

impl From<PlatformError> for ApiError {
    fn from(e: PlatformError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}
