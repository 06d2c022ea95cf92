mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use burst_market::gateway::{router, ChannelFrame, FrameSender, FrameType, Gateway, Shared, MAX_FRAME_BYTES};
use burst_market::kernel::{compute_charge, AccountId, Clock, Rate, SessionId, SimClock};
use burst_market::platform::{Config, Platform};
use burst_market::session::{Party, SessionState};
use futures::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::protocol::frame::coding::CloseCode;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use common::drain;

struct Api {
    app: Router,
    shared: Shared,
    clock: SimClock,
}

impl Api {
    fn new(config: Config) -> Api {
        let clock = SimClock::default();
        let shared = Gateway::shared(Platform::in_memory(config, Arc::new(clock.clone())));
        Api {
            app: router(shared.clone()),
            shared,
            clock,
        }
    }

    async fn call(&self, method: Method, path: &str, token: Option<&str>, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let req = match body {
            Some(b) => req
                .header("content-type", "application/json")
                .body(Body::from(b.to_string()))
                .unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into_owned()));
        (status, value)
    }

    async fn register(&self, name: &str, fingerprint: &str) -> (String, String) {
        let (status, body) = self
            .call(
                Method::POST,
                "/accounts",
                None,
                Some(json!({"display_name": name, "fingerprint": fingerprint})),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        (
            body["account"]["account_id"].as_str().unwrap().to_owned(),
            body["token"].as_str().unwrap().to_owned(),
        )
    }

    async fn listing(&self, token: &str, title: &str, tags: &[&str], cents: u64, level: &str) -> String {
        let (status, body) = self
            .call(
                Method::POST,
                "/listings",
                Some(token),
                Some(json!({"title": title, "tags": tags,
                            "rate": {"kind": "PerMinute", "per_minute": {"amount": cents, "currency": "USD"}}})),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        let id = body["listing_id"].as_str().unwrap().to_owned();
        let (status, body) = self
            .call(
                Method::PUT,
                &format!("/listings/{id}/availability"),
                Some(token),
                Some(json!({"windows": [{"start": "2030-01-01T00:00:00Z", "end": "2030-01-02T00:00:00Z", "level": level}]})),
            )
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        id
    }
}

#[tokio::test]
async fn duplicate_fingerprint_is_a_conflict() {
    let api = Api::new(Config::default());
    api.register("sam", "card-1").await;
    let (status, body) = api
        .call(
            Method::POST,
            "/accounts",
            None,
            Some(json!({"display_name": "sam2", "fingerprint": "card-1"})),
        )
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "ExcessiveAccounts");
    assert_eq!(body["http_status"], 409);
}

#[tokio::test]
async fn search_ranks_with_score_parts() {
    let api = Api::new(Config::default());
    let (_, sam) = api.register("sam", "card-s").await;
    let (_, ann) = api.register("ann", "card-a").await;
    let plumbing = api
        .listing(&sam, "Plumbing advice", &["plumbing", "pipes"], 100, "L1")
        .await;
    let other = api.listing(&ann, "Plumbing and tiling", &["tiles"], 300, "L2").await;
    api.listing(&ann, "Guitar lessons", &["music"], 50, "L1").await;

    let (status, body) = api.call(Method::GET, "/search?q=plumbing", None, None).await;
    assert_eq!(status, StatusCode::OK);
    let results = body.as_array().unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0]["listing_id"], plumbing.as_str());
    assert_eq!(results[1]["listing_id"], other.as_str());
    for (i, r) in results.iter().enumerate() {
        assert_eq!(r["rank"], i + 1);
        for part in ["lexical", "reputation", "price", "availability"] {
            let v = r["parts"][part].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&v), "{part} = {v}");
        }
    }
    // cheaper and unconditional: full price and availability parts
    assert_eq!(results[0]["parts"]["availability"], 1.0);
    assert_eq!(results[1]["parts"]["availability"], 0.6);
    assert_eq!(results[1]["parts"]["price"], 0.0);
    assert!(results[0]["total_score"].as_f64() > results[1]["total_score"].as_f64());

    let (_, body) = api
        .call(Method::GET, "/search?q=plumbing&max_price=150", None, None)
        .await;
    assert_eq!(body.as_array().unwrap().len(), 1);

    let (status, body) = api.call(Method::GET, "/search?q=%20%21", None, None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "EmptyQuery");
}

#[tokio::test]
async fn direct_request_on_appointment_listing_is_refused() {
    let api = Api::new(Config::default());
    let (_, sam) = api.register("sam", "card-s").await;
    let (_, bo) = api.register("bo", "card-b").await;
    let lst = api.listing(&sam, "Tax returns", &[], 200, "L3").await;
    let (status, body) = api
        .call(Method::POST, "/sessions", Some(&bo), Some(json!({"listing_id": lst})))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "AppointmentRequired");

    let (status, body) = api
        .call(
            Method::POST,
            "/appointments",
            Some(&bo),
            Some(json!({"listing_id": lst, "slot_start": "2030-01-01T01:00:00Z"})),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    assert_eq!(body["session"]["state"], "Scheduled");
    assert_eq!(body["appointment"]["slot_start"], "2030-01-01T01:00:00Z");
}

#[tokio::test]
async fn authentication_and_error_mapping() {
    let api = Api::new(Config::default());
    let (sam_id, sam) = api.register("sam", "card-s").await;
    let (bo_id, bo) = api.register("bo", "card-b").await;

    let (status, body) = api
        .call(Method::GET, &format!("/accounts/{sam_id}/balance"), None, None)
        .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::UNAUTHORIZED, Some("Unauthenticated"))
    );
    let (status, _) = api
        .call(
            Method::GET,
            &format!("/accounts/{sam_id}/balance"),
            Some("bm_nope"),
            None,
        )
        .await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, body) = api
        .call(Method::GET, &format!("/accounts/{sam_id}/balance"), Some(&bo), None)
        .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::FORBIDDEN, Some("Forbidden"))
    );
    let (status, body) = api
        .call(Method::GET, &format!("/accounts/{bo_id}/balance"), Some(&bo), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["available"]["amount"], 10_000);

    let (status, body) = api.call(Method::GET, "/listings/lst_missing", None, None).await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::NOT_FOUND, Some("UnknownListing"))
    );
    let (status, body) = api.call(Method::GET, "/no/such/route", None, None).await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::NOT_FOUND, Some("NotFound"))
    );
    let (status, body) = api
        .call(Method::POST, "/accounts", None, Some(json!({"display_name": 3})))
        .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::BAD_REQUEST, Some("BadRequest"))
    );

    let (status, body) = api
        .call(
            Method::POST,
            "/listings",
            Some(&sam),
            Some(json!({"title": "", "rate": {"kind": "PerCase", "per_case": {"amount": 5, "currency": "USD"}}})),
        )
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
}

#[tokio::test]
async fn a_session_over_http_settles_and_is_rated() {
    let api = Api::new(Config::default());
    let (sam_id, sam) = api.register("sam", "card-s").await;
    let (bo_id, bo) = api.register("bo", "card-b").await;
    let (_, eve) = api.register("eve", "card-e").await;
    let lst = api.listing(&sam, "Plumbing advice", &[], 100, "L1").await;

    let (status, s) = api
        .call(Method::POST, "/sessions", Some(&bo), Some(json!({"listing_id": lst})))
        .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(s["state"], "Accepted");
    let sid = s["session_id"].as_str().unwrap().to_owned();

    let (status, body) = api
        .call(
            Method::POST,
            &format!("/sessions/{sid}/respond"),
            Some(&sam),
            Some(json!({"decision": "reject"})),
        )
        .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::CONFLICT, Some("NotPending"))
    );

    api.call(Method::POST, &format!("/sessions/{sid}/join"), Some(&bo), None)
        .await;
    let (_, s) = api
        .call(Method::POST, &format!("/sessions/{sid}/join"), Some(&sam), None)
        .await;
    assert_eq!(s["state"], "Live");
    for _ in 0..30 {
        api.clock.advance(3);
        api.call(Method::POST, &format!("/sessions/{sid}/heartbeat"), Some(&bo), None)
            .await;
        api.call(Method::POST, &format!("/sessions/{sid}/heartbeat"), Some(&sam), None)
            .await;
    }
    let (status, ended) = api
        .call(Method::POST, &format!("/sessions/{sid}/end"), Some(&bo), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ended["receipt"]["charge"]["amount"], 150);

    let (status, _) = api
        .call(Method::GET, &format!("/sessions/{sid}/receipt"), Some(&eve), None)
        .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, r) = api
        .call(Method::GET, &format!("/sessions/{sid}/receipt"), Some(&sam), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["seller_credit"]["amount"], 120);

    let rating = json!({"stars": 4, "review": "good"});
    let (status, _) = api
        .call(
            Method::POST,
            &format!("/sessions/{sid}/rating"),
            Some(&bo),
            Some(rating.clone()),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, body) = api
        .call(
            Method::POST,
            &format!("/sessions/{sid}/rating"),
            Some(&bo),
            Some(rating),
        )
        .await;
    assert_eq!(
        (status, body["code"].as_str()),
        (StatusCode::CONFLICT, Some("DuplicateRating"))
    );
    let (status, body) = api
        .call(
            Method::POST,
            &format!("/sessions/{sid}/rating"),
            Some(&sam),
            Some(json!({"stars": 9})),
        )
        .await;
    assert_eq!(status.as_u16() / 100, 4, "{body}");

    let (_, detail) = api.call(Method::GET, &format!("/listings/{lst}"), None, None).await;
    assert_eq!(detail["summary"]["rating_count"], 1);
    assert_eq!(detail["reviews"][0]["review"], "good");

    let (_, st) = api
        .call(Method::GET, &format!("/accounts/{bo_id}/statement"), Some(&bo), None)
        .await;
    assert_eq!(st.as_array().unwrap().len(), 1);
    assert_eq!(st[0]["delta"], -150);
    let (_, summary) = api
        .call(Method::GET, &format!("/accounts/{sam_id}/summary"), None, None)
        .await;
    assert_eq!(summary["avg_stars"], 4.0);

    let (status, csv) = api
        .call(Method::GET, "/metrics/transaction-costs?format=csv", None, None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert!(csv.as_str().unwrap().starts_with("bucket,count,mean,p50,p95\n"));
    let (status, _) = api
        .call(Method::GET, "/metrics/transaction-costs?format=xml", None, None)
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

fn live_pair(config: Config) -> (Gateway, SimClock, SessionId, AccountId, AccountId) {
    let clock = SimClock::default();
    let mut p = Platform::in_memory(config, Arc::new(clock.clone()));
    let seller = p.register_account("sam", "card-s").unwrap().account.account_id;
    let buyer = p.register_account("bo", "card-b").unwrap().account.account_id;
    let new = burst_market::registry::NewListing {
        title: "Plumbing".into(),
        description: String::new(),
        tags: vec![],
        rate: Rate::per_minute(100),
    };
    let l = p.create_listing(&seller, &new).unwrap();
    let window = burst_market::registry::WindowSpec {
        start: clock.now(),
        end: clock.now() + 86_400,
        level: burst_market::registry::ServiceLevel::Unconditional,
    };
    p.set_availability(&seller, &l.listing_id, &[window]).unwrap();
    let sid = p.request_session(&buyer, &l.listing_id).unwrap().session_id;
    (Gateway::new(p), clock, sid, buyer, seller)
}

fn chat(text: &str) -> String {
    json!({"frame_type": "chat", "body": {"text": text}}).to_string()
}

#[test]
fn channel_relays_chat_in_order_and_meters() {
    let (mut g, clock, sid, buyer, seller) = live_pair(Config::default());
    let mut b = g.hub.open(&mut g.platform, &sid, &buyer).unwrap();
    assert!(drain(&mut b.frames).is_empty());
    let mut s = g.hub.open(&mut g.platform, &sid, &seller).unwrap();
    let first = drain(&mut b.frames);
    assert_eq!(first.len(), 1);
    assert_eq!(first[0].frame_type, FrameType::Meter);
    assert_eq!(first[0].body["state"], "Live");
    assert!(!drain(&mut s.frames).is_empty());

    for i in 0..20 {
        clock.advance(1);
        g.hub
            .inbound(&mut g.platform, &sid, Party::Buyer, &chat(&format!("m{i}")))
            .unwrap();
        g.hub
            .inbound(
                &mut g.platform,
                &sid,
                Party::Seller,
                r#"{"frame_type":"offer","body":"sdp"}"#,
            )
            .unwrap();
        g.pump();
    }
    let got = drain(&mut s.frames);
    let chats: Vec<&ChannelFrame> = got.iter().filter(|f| f.frame_type == FrameType::Chat).collect();
    let texts: Vec<String> = chats
        .iter()
        .map(|f| f.body["text"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(texts, (0..20).map(|i| format!("m{i}")).collect::<Vec<_>>());
    assert!(chats.iter().all(|f| f.sender == FrameSender::Buyer));

    let to_buyer = drain(&mut b.frames);
    assert_eq!(to_buyer.iter().filter(|f| f.frame_type == FrameType::Offer).count(), 20);
    let meters: Vec<&ChannelFrame> = got.iter().filter(|f| f.frame_type == FrameType::Meter).collect();
    assert_eq!(meters.len(), 20);
    let hold_rate = Rate::per_minute(100);
    for m in &meters {
        let secs = m.body["metered_seconds"].as_u64().unwrap();
        assert_eq!(
            m.body["accrued_charge"]["amount"],
            compute_charge(hold_rate, secs).amount()
        );
        assert_eq!(m.sender, FrameSender::Server);
    }
    assert_eq!(meters.last().unwrap().body["metered_seconds"], 20);
}

#[test]
fn silent_buyer_gets_an_ended_frame() {
    let (mut g, clock, sid, buyer, seller) = live_pair(Config::default());
    let mut b = g.hub.open(&mut g.platform, &sid, &buyer).unwrap();
    let mut s = g.hub.open(&mut g.platform, &sid, &seller).unwrap();
    for sec in 1..=20 {
        clock.advance(1);
        if sec <= 10 {
            g.hub.inbound(&mut g.platform, &sid, Party::Buyer, &chat("hi")).unwrap();
        }
        g.hub.keepalive(&mut g.platform, &sid, Party::Seller);
        g.pump();
    }
    for frames in [drain(&mut b.frames), drain(&mut s.frames)] {
        let ended: Vec<&ChannelFrame> = frames.iter().filter(|f| f.frame_type == FrameType::Ended).collect();
        assert_eq!(ended.len(), 1);
        assert_eq!(ended[0].body["end_reason"], "HeartbeatLoss");
        assert_eq!(ended[0].body["metered_seconds"], 10);
        assert_eq!(
            ended[0].body["receipt"]["charge"]["amount"],
            compute_charge(Rate::per_minute(100), 10).amount()
        );
    }
    let session = g.platform.session(&sid).unwrap();
    assert_eq!(session.state, SessionState::Settled);
    assert_eq!(g.hub.connections(), 0);
}

#[test]
fn bad_frames_are_rejected() {
    let (mut g, _clock, sid, buyer, seller) = live_pair(Config::default());
    let _b = g.hub.open(&mut g.platform, &sid, &buyer).unwrap();
    let _s = g.hub.open(&mut g.platform, &sid, &seller).unwrap();
    let big = chat(&"x".repeat(MAX_FRAME_BYTES));
    let e = g.hub.inbound(&mut g.platform, &sid, Party::Buyer, &big).unwrap_err();
    assert_eq!((e.code.as_str(), e.http_status), ("FrameTooLarge", 413));
    let e = g
        .hub
        .inbound(
            &mut g.platform,
            &sid,
            Party::Buyer,
            r#"{"frame_type":"meter","body":{}}"#,
        )
        .unwrap_err();
    assert_eq!(e.code, "InvalidFrame");
    let e = g
        .hub
        .inbound(&mut g.platform, &sid, Party::Buyer, "not json")
        .unwrap_err();
    assert_eq!(e.code, "InvalidFrame");
}

#[test]
fn channels_are_refused_to_outsiders_and_closed_sessions() {
    let (mut g, _clock, sid, buyer, seller) = live_pair(Config::default());
    let eve = g.platform.register_account("eve", "card-e").unwrap().account.account_id;
    let e = g.hub.open(&mut g.platform, &sid, &eve).unwrap_err();
    assert_eq!((e.code.as_str(), e.http_status), ("ChannelRefused", 409));

    let _b = g.hub.open(&mut g.platform, &sid, &buyer).unwrap();
    let _s = g.hub.open(&mut g.platform, &sid, &seller).unwrap();
    g.platform.end_session(&buyer, &sid).unwrap();
    g.hub.dispatch(&mut g.platform);
    let e = g.hub.open(&mut g.platform, &sid, &buyer).unwrap_err();
    assert_eq!(e.code, "ChannelRefused");
}

async fn serve_on_loopback(shared: Shared) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(shared);
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    addr
}

async fn next_frame<S>(ws: &mut S) -> ChannelFrame
where
    S: futures::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match ws.next().await.unwrap().unwrap() {
            Message::Text(t) => return serde_json::from_str(&t).unwrap(),
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("unexpected message {other:?}"),
        }
    }
}

#[tokio::test]
async fn websocket_channel_end_to_end() {
    let api = Api::new(Config::default());
    let (_, sam) = api.register("sam", "card-s").await;
    let (_, bo) = api.register("bo", "card-b").await;
    let lst = api.listing(&sam, "Plumbing advice", &[], 100, "L1").await;
    let (_, s) = api
        .call(Method::POST, "/sessions", Some(&bo), Some(json!({"listing_id": lst})))
        .await;
    let sid = s["session_id"].as_str().unwrap().to_owned();
    let addr = serve_on_loopback(api.shared.clone()).await;

    let url = |t: &str| format!("ws://{addr}/sessions/{sid}/channel?token={t}");
    let (mut buyer, _) = tokio_tungstenite::connect_async(url(&bo)).await.unwrap();
    let (mut seller, _) = tokio_tungstenite::connect_async(url(&sam)).await.unwrap();
    assert_eq!(next_frame(&mut buyer).await.body["state"], "Live");
    assert_eq!(next_frame(&mut seller).await.frame_type, FrameType::Meter);

    let body = json!({"text": "where is the leak?", "n": [1, 2, 3]});
    let frame = json!({"frame_type": "chat", "body": body}).to_string();
    buyer.send(Message::Text(frame.into())).await.unwrap();
    let got = next_frame(&mut seller).await;
    assert_eq!((got.frame_type, got.sender), (FrameType::Chat, FrameSender::Buyer));
    assert_eq!(got.body, body);

    for i in 0..30 {
        api.clock.advance(1);
        buyer.send(Message::Text(chat(&format!("b{i}")).into())).await.unwrap();
        assert_eq!(next_frame(&mut seller).await.body["text"], format!("b{i}"));
        seller.send(Message::Text(chat(&format!("s{i}")).into())).await.unwrap();
        assert_eq!(next_frame(&mut buyer).await.body["text"], format!("s{i}"));
    }

    let (status, ended) = api
        .call(Method::POST, &format!("/sessions/{sid}/end"), Some(&bo), None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ended["receipt"]["charge"]["amount"], 50);
    for ws in [&mut buyer, &mut seller] {
        let f = next_frame(ws).await;
        assert_eq!(f.frame_type, FrameType::Ended);
        assert_eq!(f.body["end_reason"], "BuyerEnded");
        assert_eq!(f.body["receipt"]["charge"]["amount"], 50);
    }
}

#[tokio::test]
async fn websocket_closes_on_oversized_frames_and_refuses_outsiders() {
    let api = Api::new(Config::default());
    let (_, sam) = api.register("sam", "card-s").await;
    let (_, bo) = api.register("bo", "card-b").await;
    let (_, eve) = api.register("eve", "card-e").await;
    let lst = api.listing(&sam, "Plumbing advice", &[], 100, "L1").await;
    let (_, s) = api
        .call(Method::POST, "/sessions", Some(&bo), Some(json!({"listing_id": lst})))
        .await;
    let sid = s["session_id"].as_str().unwrap().to_owned();
    let addr = serve_on_loopback(api.shared.clone()).await;
    let url = |t: &str| format!("ws://{addr}/sessions/{sid}/channel?token={t}");

    let refused = tokio_tungstenite::connect_async(url(&eve)).await;
    match refused {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 409),
        other => panic!("expected 409, got {other:?}"),
    }
    let unauth = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{sid}/channel")).await;
    match unauth {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), 401),
        other => panic!("expected 401, got {other:?}"),
    }

    let (mut buyer, _) = tokio_tungstenite::connect_async(url(&bo)).await.unwrap();
    buyer
        .send(Message::Text(chat(&"x".repeat(MAX_FRAME_BYTES + 1)).into()))
        .await
        .unwrap();
    loop {
        match buyer.next().await {
            Some(Ok(Message::Close(Some(cf)))) => {
                assert_eq!(cf.code, CloseCode::Size);
                assert_eq!(cf.reason.as_str(), "FrameTooLarge");
                break;
            }
            Some(Ok(Message::Text(_))) => continue,
            other => panic!("expected a close frame, got {other:?}"),
        }
    }
}
