//! HTTP + WebSocket surface over a shared [`Platform`].

mod channel;
mod error;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError};
use std::time::Duration;

use axum::extract::rejection::QueryRejection;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, FromRequestParts, Path, Query, Request, State};
use axum::http::request::Parts;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{AccountId, ListingId, Money, SessionId, SystemClock, Timestamp};
use crate::matching::{MatchQuery, DEFAULT_MAX_RESULTS};
use crate::persistence::PersistenceError;
use crate::platform::{Config, Platform, PlatformError};
use crate::registry::{NewListing, WindowSpec};
use crate::session::{Decision, SessionError};

pub use channel::{ChannelFrame, ChannelHandle, ChannelHub, FrameSender, FrameType, MAX_FRAME_BYTES};
pub use error::{status_for, ApiError, GATEWAY_CODES, STATUS_TABLE};

/// The platform plus the live channels attached to it, behind one lock.
#[derive(Debug)]
pub struct Gateway {
    pub platform: Platform,
    pub hub: ChannelHub,
}

pub type Shared = Arc<Mutex<Gateway>>;

impl Gateway {
    pub fn new(mut platform: Platform) -> Self {
        platform.enable_change_feed();
        Gateway {
            platform,
            hub: ChannelHub::new(),
        }
    }

    pub fn shared(platform: Platform) -> Shared {
        Arc::new(Mutex::new(Gateway::new(platform)))
    }

    /// Runs one once-per-second cycle of timeouts and meter frames.
    pub fn pump(&mut self) {
        self.hub.pump(&mut self.platform);
    }
}

fn lock(shared: &Shared) -> MutexGuard<'_, Gateway> {
    shared.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Runs `f` after firing due timeouts, then pushes any resulting channel frames.
fn with<T>(shared: &Shared, f: impl FnOnce(&mut Platform) -> Result<T, PlatformError>) -> Result<T, ApiError> {
    let mut guard = lock(shared);
    let g = &mut *guard;
    let out = g.platform.tick().and_then(|_| f(&mut g.platform));
    g.hub.dispatch(&mut g.platform);
    out.map_err(Into::into)
}

/// JSON request body whose rejections come back as [`ApiError`].
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(ApiError::bad_request(e.body_text())),
        }
    }
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(v)| v).map_err(|e| ApiError::bad_request(e.body_text()))
}

fn bearer(parts: &Parts) -> Option<&str> {
    parts
        .headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

/// The authenticated account behind the request's bearer token.
pub struct Caller(pub AccountId);

impl FromRequestParts<Shared> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        let token = bearer(parts).ok_or_else(|| ApiError::from(PlatformError::Unauthenticated))?;
        let id = lock(state).platform.authenticate(token)?;
        Ok(Caller(id))
    }
}

/// Like [`Caller`] but anonymous requests pass through.
pub struct MaybeCaller(pub Option<AccountId>);

impl FromRequestParts<Shared> for MaybeCaller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Shared) -> Result<Self, Self::Rejection> {
        match bearer(parts) {
            None => Ok(MaybeCaller(None)),
            Some(token) => Ok(MaybeCaller(Some(lock(state).platform.authenticate(token)?))),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RegisterBody {
    display_name: String,
    fingerprint: String,
}

#[derive(Debug, Deserialize)]
struct AvailabilityBody {
    windows: Vec<WindowSpec>,
}

#[derive(Debug, Deserialize)]
struct RequestBody {
    listing_id: ListingId,
}

#[derive(Debug, Deserialize)]
struct RespondBody {
    decision: Decision,
}

#[derive(Debug, Deserialize)]
struct BookBody {
    listing_id: ListingId,
    slot_start: Timestamp,
}

#[derive(Debug, Deserialize)]
struct RatingBody {
    stars: u32,
    #[serde(default)]
    review: String,
}

#[derive(Debug, Deserialize)]
struct SearchParams {
    q: String,
    /// Cents.
    max_price: Option<u64>,
    max_results: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RangeParams {
    from: Option<Timestamp>,
    to: Option<Timestamp>,
}

#[derive(Debug, Deserialize)]
struct FormatParams {
    format: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChannelParams {
    token: Option<String>,
}

#[derive(Debug, Serialize)]
struct BalanceBody {
    account_id: AccountId,
    available: Money,
    held: Money,
}

pub fn router(shared: Shared) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/accounts", post(register))
        .route("/accounts/{id}/balance", get(balance))
        .route("/accounts/{id}/statement", get(statement))
        .route("/accounts/{id}/summary", get(summary))
        .route("/listings", post(create_listing))
        .route("/listings/{id}", get(listing_detail))
        .route("/listings/{id}/availability", put(set_availability))
        .route("/listings/{id}/deactivate", post(deactivate))
        .route("/search", get(search))
        .route("/sessions", post(request_session))
        .route("/sessions/{id}", get(session))
        .route("/sessions/{id}/respond", post(respond))
        .route("/sessions/{id}/join", post(join))
        .route("/sessions/{id}/heartbeat", post(heartbeat))
        .route("/sessions/{id}/end", post(end_session))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/rating", post(rate))
        .route("/sessions/{id}/receipt", get(receipt))
        .route("/sessions/{id}/channel", get(channel))
        .route("/appointments", post(book))
        .route("/metrics/transaction-costs", get(metrics))
        .fallback(|| async { ApiError::new("NotFound", "no such route") })
        .with_state(shared)
}

type ApiResult<T> = Result<T, ApiError>;

async fn register(State(s): State<Shared>, Body(b): Body<RegisterBody>) -> ApiResult<impl IntoResponse> {
    let r = with(&s, |p| p.register_account(&b.display_name, &b.fingerprint))?;
    Ok((StatusCode::CREATED, Json(r)))
}

fn own(caller: &AccountId, id: &AccountId) -> ApiResult<()> {
    if caller == id {
        Ok(())
    } else {
        Err(PlatformError::Forbidden.into())
    }
}

async fn balance(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<AccountId>,
) -> ApiResult<impl IntoResponse> {
    own(&caller, &id)?;
    let b = with(&s, |p| p.balance(&id))?;
    Ok(Json(BalanceBody {
        account_id: id,
        available: b.available,
        held: b.held,
    }))
}

async fn statement(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<AccountId>,
    q: Result<Query<RangeParams>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    own(&caller, &id)?;
    let r = query(q)?;
    let from = r.from.unwrap_or(Timestamp::from_unix(i64::MIN / 2));
    let to = r.to.unwrap_or(Timestamp::from_unix(i64::MAX / 2));
    Ok(Json(with(&s, |p| p.statement(&id, from, to))?))
}

async fn summary(State(s): State<Shared>, Path(id): Path<AccountId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.seller_summary(&id))?))
}

async fn create_listing(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Body(b): Body<NewListing>,
) -> ApiResult<impl IntoResponse> {
    let l = with(&s, |p| p.create_listing(&caller, &b))?;
    Ok((StatusCode::CREATED, Json(l)))
}

async fn listing_detail(State(s): State<Shared>, Path(id): Path<ListingId>) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.listing_detail(&id))?))
}

async fn set_availability(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<ListingId>,
    Body(b): Body<AvailabilityBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.set_availability(&caller, &id, &b.windows))?))
}

async fn deactivate(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<ListingId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.deactivate_listing(&caller, &id))?))
}

async fn search(
    State(s): State<Shared>,
    MaybeCaller(caller): MaybeCaller,
    q: Result<Query<SearchParams>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let params = query(q)?;
    let mq = MatchQuery {
        text: params.q,
        max_results: params.max_results.unwrap_or(DEFAULT_MAX_RESULTS),
        max_price: params.max_price.map(Money::cents),
    };
    Ok(Json(with(&s, |p| p.search(caller.as_ref(), &mq))?))
}

async fn request_session(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Body(b): Body<RequestBody>,
) -> ApiResult<impl IntoResponse> {
    let session = with(&s, |p| p.request_session(&caller, &b.listing_id))?;
    Ok((StatusCode::CREATED, Json(session)))
}

fn party_only(p: &Platform, caller: &AccountId, id: &SessionId) -> Result<(), PlatformError> {
    match p.session(id)?.party_of(caller) {
        Some(_) => Ok(()),
        None => Err(SessionError::NotYourSession.into()),
    }
}

async fn session(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| {
        party_only(p, &caller, &id)?;
        p.session(&id).cloned()
    })?))
}

async fn respond(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
    Body(b): Body<RespondBody>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.respond(&caller, &id, b.decision))?))
}

async fn join(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.join(&caller, &id))?))
}

async fn heartbeat(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.heartbeat(&caller, &id))?))
}

async fn end_session(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.end_session(&caller, &id))?))
}

async fn cancel(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| p.cancel_appointment(&caller, &id))?))
}

async fn rate(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
    Body(b): Body<RatingBody>,
) -> ApiResult<impl IntoResponse> {
    let r = with(&s, |p| p.rate_session(&caller, &id, b.stars, &b.review))?;
    Ok((StatusCode::CREATED, Json(r)))
}

async fn receipt(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Path(id): Path<SessionId>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(with(&s, |p| {
        party_only(p, &caller, &id)?;
        p.receipt(&id).cloned()
    })?))
}

async fn book(
    State(s): State<Shared>,
    Caller(caller): Caller,
    Body(b): Body<BookBody>,
) -> ApiResult<impl IntoResponse> {
    let (appointment, session) = with(&s, |p| p.book_appointment(&caller, &b.listing_id, b.slot_start))?;
    Ok((
        StatusCode::CREATED,
        Json(serde_json::json!({ "appointment": appointment, "session": session })),
    ))
}

async fn metrics(State(s): State<Shared>, q: Result<Query<FormatParams>, QueryRejection>) -> ApiResult<Response> {
    let params = query(q)?;
    let buckets = with(&s, |p| Ok(p.transaction_costs()))?;
    Ok(match params.format.as_deref() {
        Some("csv") => (
            [(header::CONTENT_TYPE, "text/csv")],
            crate::econometrics::aggregates_csv(&buckets),
        )
            .into_response(),
        None | Some("json") => Json(buckets).into_response(),
        Some(other) => ApiError::bad_request(format!("unknown format {other}")).into_response(),
    })
}

async fn channel(
    State(s): State<Shared>,
    Path(id): Path<SessionId>,
    q: Result<Query<ChannelParams>, QueryRejection>,
    headers: axum::http::HeaderMap,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let params = query(q)?;
    let header_token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_owned);
    let token = params
        .token
        .or(header_token)
        .ok_or_else(|| ApiError::from(PlatformError::Unauthenticated))?;
    let handle = {
        let mut guard = lock(&s);
        let g = &mut *guard;
        let caller = g.platform.authenticate(&token)?;
        g.hub.open(&mut g.platform, &id, &caller)?
    };
    // oversized frames must reach the hub so it can name the error
    Ok(ws
        .max_message_size(MAX_FRAME_BYTES * 4)
        .on_upgrade(move |socket| run_channel(socket, s, id, handle)))
}

fn close_frame(e: &ApiError) -> Message {
    let code = if e.code == "FrameTooLarge" { 1009 } else { 1008 };
    Message::Close(Some(CloseFrame {
        code,
        reason: e.code.clone().into(),
    }))
}

async fn run_channel(mut socket: WebSocket, shared: Shared, sid: SessionId, mut handle: ChannelHandle) {
    let party = handle.party;
    loop {
        tokio::select! {
            out = handle.frames.recv() => {
                let Some(frame) = out else { break };
                let ended = frame.frame_type == FrameType::Ended;
                let text = serde_json::to_string(&frame).expect("frames serialize");
                if socket.send(Message::Text(text.into())).await.is_err() || ended {
                    break;
                }
            }
            msg = socket.recv() => {
                let raw = match msg {
                    Some(Ok(Message::Text(t))) => Ok(t.to_string()),
                    Some(Ok(Message::Binary(b))) => String::from_utf8(b.to_vec())
                        .map_err(|_| ApiError::new("InvalidFrame", "frames are UTF-8 JSON")),
                    Some(Ok(Message::Ping(_) | Message::Pong(_))) => {
                        let mut guard = lock(&shared);
                        let g = &mut *guard;
                        g.hub.keepalive(&mut g.platform, &sid, party);
                        continue;
                    }
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                };
                let result = raw.and_then(|raw| {
                    let mut guard = lock(&shared);
                    let g = &mut *guard;
                    g.hub.inbound(&mut g.platform, &sid, party, &raw)
                });
                if let Err(e) = result {
                    let _ = socket.send(close_frame(&e)).await;
                    break;
                }
            }
        }
    }
    lock(&shared).hub.close(&sid, party, handle.conn_id);
    let _ = socket.send(Message::Close(None)).await;
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("address {0} is already in use")]
    AddrInUse(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Platform(#[from] PlatformError),
}

impl ServeError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ServeError::Platform(PlatformError::Persistence(PersistenceError::CorruptLog { .. })) => 1,
            _ => 3,
        }
    }
}

/// Serves until ctrl-c or SIGTERM, then flushes the log. `ready` receives the
/// bound address once the listener is up.
pub async fn serve(config: Config, ready: impl FnOnce(SocketAddr)) -> Result<(), ServeError> {
    let platform = Platform::open(config.clone(), Arc::new(SystemClock::new()))?;
    if let Some(t) = platform.recovered_tail() {
        eprintln!("dropped torn record at seq {} ({} bytes)", t.at_seq, t.bytes_dropped);
    }
    let listener = tokio::net::TcpListener::bind(&config.listen_addr)
        .await
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => ServeError::AddrInUse(config.listen_addr.clone()),
            _ => ServeError::Io(e),
        })?;
    ready(listener.local_addr()?);
    let shared = Gateway::shared(platform);
    let pump = {
        let shared = shared.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(Duration::from_secs(1));
            loop {
                every.tick().await;
                lock(&shared).pump();
            }
        })
    };
    axum::serve(listener, router(shared.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    pump.abort();
    lock(&shared).platform.flush()?;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
