use std::time::Duration;

use brickpad_core::emulator::{BrickConfig, EmuServer, EventKind, SharedBrick, VirtualBrick};
use brickpad_core::protocol::OutputState;
use brickpad_core::session::{Phase, Session, SessionConfig};
use brickpad_service::{serve, Service, ServiceOptions};
use futures_util::StreamExt;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpSocket;
use tokio::time::{sleep, timeout, Instant};
use tokio_tungstenite::tungstenite::Message;

struct Harness {
    server: EmuServer,
    base: String,
    http: reqwest::Client,
    service: Service,
}

impl Harness {
    async fn start() -> Self {
        Self::with_options(ServiceOptions::default()).await
    }

    async fn with_options(options: ServiceOptions) -> Self {
        Self::build(options, None).await
    }

    async fn build(options: ServiceOptions, send_buffer: Option<u32>) -> Self {
        let brick = VirtualBrick::new(BrickConfig {
            sleep_limit_ms: 1000,
            ..BrickConfig::default()
        })
        .shared();
        let server = EmuServer::bind("127.0.0.1:0", brick, None).unwrap();
        let session = Session::new(SessionConfig {
            poll_interval_ms: 100,
            ..SessionConfig::default()
        });
        let service = Service::new(session, options);
        let socket = TcpSocket::new_v4().unwrap();
        if let Some(size) = send_buffer {
            // inherited by accepted connections
            socket.set_send_buffer_size(size).unwrap();
        }
        socket.bind("127.0.0.1:0".parse().unwrap()).unwrap();
        let listener = socket.listen(64).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(serve(listener, service.clone(), std::future::pending()));
        Self {
            server,
            base,
            http: reqwest::Client::new(),
            service,
        }
    }

    fn brick(&self) -> &SharedBrick {
        self.server.brick()
    }

    fn endpoint(&self) -> String {
        format!("tcp:127.0.0.1:{}", self.server.local_addr().port())
    }

    async fn post(&self, path: &str, body: Option<Value>) -> (StatusCode, Value) {
        let mut req = self.http.post(format!("{}{path}", self.base));
        if let Some(body) = body {
            req = req.json(&body);
        }
        let resp = req.send().await.unwrap();
        let status = resp.status();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> Value {
        let resp = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        resp.json().await.unwrap()
    }

    async fn connect(&self) {
        let (status, body) = self
            .post("/api/connect", Some(json!({ "endpoint": self.endpoint() })))
            .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["phase"], "Connected");
    }

    async fn ws(&self) -> tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>> {
        let url = format!("{}/api/events", self.base.replace("http://", "ws://"));
        tokio_tungstenite::connect_async(url).await.unwrap().0
    }

    /// Drive-command telegrams the brick has applied to `port`.
    fn drives(&self, port: u8) -> usize {
        self.brick()
            .lock()
            .unwrap()
            .events()
            .filter(|e| matches!(e.kind, EventKind::OutputSet { port: p, mode: 0x05, .. } if p == port))
            .count()
    }

    async fn until(&self, what: &str, mut check: impl FnMut(&VirtualBrick) -> bool) {
        let deadline = Instant::now() + Duration::from_secs(2);
        while !check(&self.brick().lock().unwrap()) {
            assert!(Instant::now() < deadline, "timed out waiting for {what}");
            sleep(Duration::from_millis(10)).await;
        }
    }
}

async fn next_event(
    ws: &mut tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
) -> Option<Value> {
    loop {
        match timeout(Duration::from_secs(3), ws.next()).await.ok()?? {
            Ok(Message::Text(text)) => return Some(serde_json::from_str(&text).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn cw_then_status_shows_running() {
    let h = Harness::start().await;
    h.connect().await;
    let (status, motor) = h.post("/api/motor/A/cw", Some(json!({ "power": 60 }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(motor["is_running"], true);
    let st = h.get("/api/status").await;
    assert_eq!(st["motors"][0]["port"], "A");
    assert_eq!(st["motors"][0]["label"], "Rotate");
    assert_eq!(st["motors"][0]["is_running"], true);
    assert_eq!(st["motors"][0]["power"], 60);
    assert_eq!(st["motors"][1]["is_running"], false);
    assert_eq!(st["keepalive_ms"], 1000);
    h.until("motor A at -60", |b| b.snapshot().motors[0].state.power == -60)
        .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn relax_clears_latch() {
    let h = Harness::start().await;
    h.connect().await;
    h.post("/api/motor/B/ccw", None).await;
    let (status, motor) = h.post("/api/motor/B/relax", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(motor["is_running"], false);
    h.until("B coasting", |b| b.snapshot().motors[1].state == OutputState::coast(1))
        .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn raw_console() {
    let h = Harness::start().await;
    h.connect().await;
    let (status, body) = h.post("/api/raw", Some(json!({ "hex": "00 0B" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["reply_hex"], "02 0B 00 E8 1C");

    let (status, body) = h.post("/api/raw", Some(json!({ "hex": "80 09 00 04 61 62 63 00" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["reply_hex"], Value::Null);
    h.until("mailbox 0 holds abc", |b| b.snapshot().mailboxes[0] == [b"abc".to_vec()])
        .await;

    let (status, body) = h.post("/api/raw", Some(json!({ "hex": "zz" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    let (status, _) = h.post("/api/raw", Some(json!({ "hex": "05 0B" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(h.get("/api/status").await["phase"], "Connected");
}

#[tokio::test(flavor = "multi_thread")]
async fn validation_and_phase_errors() {
    let h = Harness::start().await;
    let (status, _) = h.post("/api/motor/A/cw", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h.post("/api/raw", Some(json!({ "hex": "00 0B" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h.post("/api/motor/Q/cw", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    h.connect().await;
    let (status, _) = h.post("/api/connect", Some(json!({ "endpoint": h.endpoint() }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = h.post("/api/motor/A/cw", Some(json!({ "power": 101 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = h.post("/api/motor/A/turn", Some(json!({ "power": -120, "degrees": 10 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = h.post("/api/motor/A/turn", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let resp = h
        .http
        .post(format!("{}/api/motor/A/cw", h.base))
        .body("{power:")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let (status, _) = h.post("/api/motor/A/spin", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(h.drives(0), 0);
}

#[tokio::test(flavor = "multi_thread")]
async fn connect_failure_is_bad_gateway() {
    let h = Harness::start().await;
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = dead.local_addr().unwrap().port();
    drop(dead);
    let (status, body) = h
        .post("/api/connect", Some(json!({ "endpoint": format!("tcp:127.0.0.1:{port}") })))
        .await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{body}");
    let (status, _) = h.post("/api/connect", Some(json!({ "endpoint": "bogus" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(h.get("/api/status").await["phase"], "Disconnected");
}

#[tokio::test(flavor = "multi_thread")]
async fn rapid_cw_posts_send_one_telegram() {
    let h = Harness::start().await;
    h.connect().await;
    let (a, b) = tokio::join!(h.post("/api/motor/A/cw", None), h.post("/api/motor/A/cw", None));
    assert_eq!((a.0, b.0), (StatusCode::OK, StatusCode::OK));
    h.until("drive applied", |b| b.snapshot().motors[0].state.power != 0)
        .await;
    sleep(Duration::from_millis(100)).await;
    assert_eq!(h.drives(0), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn event_stream_during_bounded_turn() {
    let h = Harness::start().await;
    h.connect().await;
    let mut ws = h.ws().await;
    let (status, _) = h
        .post("/api/motor/A/turn", Some(json!({ "power": 50, "degrees": 360 })))
        .await;
    assert_eq!(status, StatusCode::OK);

    let mut tachos = Vec::new();
    let mut last_seq = 0;
    loop {
        let event = next_event(&mut ws).await.expect("stream open");
        let seq = event["seq"].as_u64().unwrap();
        assert!(seq > last_seq);
        last_seq = seq;
        if event["type"] != "telemetry" {
            continue;
        }
        let motor = &event["payload"]["motors"][0];
        let tacho = motor["tacho"].as_i64().unwrap().abs();
        if tacho == 0 {
            continue;
        }
        tachos.push(tacho);
        if motor["run_state"] == "Idle" {
            break;
        }
        assert!(tachos.len() < 40, "turn never finished: {tachos:?}");
    }
    assert!(tachos.len() >= 2, "{tachos:?}");
    assert!(tachos.windows(2).all(|w| w[0] < w[1]), "{tachos:?}");
    assert!((360..=364).contains(tachos.last().unwrap()), "{tachos:?}");

    // the latch follows telemetry
    let st = h.get("/api/status").await;
    assert_eq!(st["motors"][0]["is_running"], false);
}

#[tokio::test(flavor = "multi_thread")]
async fn two_clients_see_the_same_sequence() {
    let h = Harness::start().await;
    let mut one = h.ws().await;
    let mut two = h.ws().await;
    h.connect().await;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..6 {
        a.push(next_event(&mut one).await.unwrap());
        b.push(next_event(&mut two).await.unwrap());
    }
    assert_eq!(a, b);
    assert_eq!(a[0]["type"], "link");
    let seqs: Vec<u64> = a.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "{seqs:?}");
}

#[tokio::test(flavor = "multi_thread")]
async fn disconnect_event_precedes_close() {
    let h = Harness::start().await;
    h.connect().await;
    h.post("/api/motor/C/cw", None).await;
    let mut ws = h.ws().await;
    let (status, body) = h.post("/api/disconnect", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["phase"], "Disconnected");
    assert_eq!(body["motors"][2]["is_running"], false);
    let mut phases = Vec::new();
    while let Some(e) = next_event(&mut ws).await {
        if e["type"] == "link" {
            phases.push(e["payload"]["phase"].clone());
            if e["payload"]["phase"] == "Disconnected" {
                break;
            }
        }
    }
    assert_eq!(phases, ["Disconnecting", "Disconnected"]);
    h.until("all coasting", |b| {
        b.snapshot().motors.iter().all(|m| m.state == OutputState::coast(m.state.port))
    })
    .await;
}

#[tokio::test(flavor = "multi_thread")]
async fn session_outlives_clients() {
    let h = Harness::start().await;
    h.connect().await;
    let mut ws = h.ws().await;
    next_event(&mut ws).await.unwrap();
    ws.close(None).await.unwrap();
    drop(ws);
    let mut other = h.ws().await;
    drop(other.next());
    drop(other);
    // longer than the brick's 1000 ms sleep limit
    sleep(Duration::from_millis(2500)).await;
    assert_eq!(h.service.session().phase(), Phase::Connected);
    assert!(!h.brick().lock().unwrap().is_asleep());
    assert_eq!(h.get("/api/status").await["phase"], "Connected");
}

#[tokio::test(flavor = "multi_thread")]
async fn slow_client_is_dropped() {
    let h = Harness::build(ServiceOptions::default(), Some(4096)).await;
    // tiny socket buffers so backpressure reaches the server quickly
    let addr = h.base.trim_start_matches("http://").parse().unwrap();
    let socket = TcpSocket::new_v4().unwrap();
    socket.set_recv_buffer_size(2048).unwrap();
    let stream = socket.connect(addr).await.unwrap();
    let url = format!("ws://{addr}/api/events");
    let (mut ws, _) = tokio_tungstenite::client_async(url, stream).await.unwrap();
    h.connect().await;
    // never read while far more than the buffer's worth of events go by
    for _ in 0..2000 {
        h.service.session().poll_telemetry().unwrap();
    }
    let mut closed = false;
    for _ in 0..2000 {
        match timeout(Duration::from_secs(3), ws.next()).await {
            Ok(Some(Ok(Message::Close(frame)))) => {
                assert_eq!(u16::from(frame.unwrap().code), 1008);
                closed = true;
                break;
            }
            Ok(Some(Ok(_))) => {}
            other => panic!("stream ended without a close frame: {other:?}"),
        }
    }
    assert!(closed);
    assert_eq!(h.service.session().phase(), Phase::Connected);
}

#[tokio::test(flavor = "multi_thread")]
async fn schema_run_stop_and_status() {
    let h = Harness::start().await;
    assert_eq!(h.get("/api/schema/status").await["state"], "idle");
    let (status, _) = h.post("/api/schema/run", Some(json!({ "text": "wait 10" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    h.connect().await;
    let (status, body) = h
        .post("/api/schema/run", Some(json!({ "text": "wait 10\nmotor Q on 5" })))
        .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["line"], 2);
    let big = "wait 1\n".repeat(10_000);
    let (status, _) = h.post("/api/schema/run", Some(json!({ "text": big }))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let (status, body) = h
        .post(
            "/api/schema/run",
            Some(json!({ "text": "motor A on 40\nmotor B on -40\nwait 60000" })),
        )
        .await;
    assert_eq!(status, StatusCode::OK);
    let id = body["run_id"].as_u64().unwrap();
    let (status, _) = h.post("/api/schema/run", Some(json!({ "text": "wait 1" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    h.until("both motors on", |b| {
        let s = b.snapshot();
        s.motors[0].state.power == 40 && s.motors[1].state.power == -40
    })
    .await;
    let st = h.get("/api/schema/status").await;
    assert_eq!(st["run_id"], id);
    assert_eq!(st["state"], "running");
    assert_eq!(st["total"], 3);

    let (status, _) = h.post("/api/schema/stop", None).await;
    assert_eq!(status, StatusCode::OK);
    let deadline = Instant::now() + Duration::from_secs(2);
    let st = loop {
        let st = h.get("/api/schema/status").await;
        if st["state"] != "running" {
            break st;
        }
        assert!(Instant::now() < deadline);
        sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(st["state"], "aborted");
    assert_eq!(st["report"]["aborted"]["kind"], "stopped");
    h.until("all coasting", |b| {
        b.snapshot().motors.iter().all(|m| m.state == OutputState::coast(m.state.port))
    })
    .await;
    let (status, _) = h.post("/api/schema/stop", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn schema_progress_is_streamed() {
    let h = Harness::start().await;
    h.connect().await;
    let mut ws = h.ws().await;
    h.post("/api/schema/run", Some(json!({ "text": "repeat 2\nmsg 0 \"hi\"\nend" })))
        .await;
    let mut states = Vec::new();
    while let Some(e) = next_event(&mut ws).await {
        if e["type"] == "schema" {
            states.push(e["payload"]["state"].as_str().unwrap().to_string());
            if e["payload"]["state"] == "finished" {
                assert_eq!(e["payload"]["report"]["steps_executed"], 2);
                break;
            }
        }
    }
    assert_eq!(states, ["started", "step", "step_finished", "step", "step_finished", "finished"]);
    assert_eq!(h.brick().lock().unwrap().snapshot().mailboxes[0].len(), 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn dev_cors_and_assets() {
    let dir = std::env::temp_dir().join(format!("brickpad-assets-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("index.html"), "<html>pad</html>").unwrap();
    std::fs::write(dir.join("app.js"), "console.log(1)").unwrap();
    let h = Harness::with_options(ServiceOptions {
        dev_cors: true,
        assets: Some(dir.clone()),
        ..ServiceOptions::default()
    })
    .await;

    let resp = h
        .http
        .request(reqwest::Method::OPTIONS, format!("{}/api/motor/A/cw", h.base))
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::NO_CONTENT);
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
    let resp = h.http.get(format!("{}/api/status", h.base)).send().await.unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");

    let resp = h.http.get(format!("{}/", h.base)).send().await.unwrap();
    assert_eq!(resp.headers()["content-type"], "text/html; charset=utf-8");
    assert_eq!(resp.text().await.unwrap(), "<html>pad</html>");
    let resp = h.http.get(format!("{}/app.js", h.base)).send().await.unwrap();
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/javascript"));
    let resp = h.http.get(format!("{}/nope.css", h.base)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    let resp = h.http.get(format!("{}/api/nothing", h.base)).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::NOT_FOUND);
    std::fs::remove_dir_all(dir).unwrap();
}
