use std::path::Path;
use std::time::Duration;

use futures::StreamExt;
use physbus_gateway::{load_palette, router, Gateway};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    http: reqwest::Client,
}

async fn start() -> Server {
    let palette = load_palette(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../descriptors")).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(Gateway::new(palette))).await.unwrap() });
    Server {
        base: format!("127.0.0.1:{}", addr.port()),
        http: reqwest::Client::new(),
    }
}

impl Server {
    async fn session(&self, config: Value) -> String {
        let r = self.http.post(format!("http://{}/session", self.base)).json(&config).send().await.unwrap();
        assert_eq!(r.status(), StatusCode::CREATED);
        r.json::<Value>().await.unwrap()["id"].as_str().unwrap().to_string()
    }

    async fn command(&self, id: &str, cmd: Value) -> (StatusCode, Value) {
        let r = self
            .http
            .post(format!("http://{}/session/{id}/command", self.base))
            .json(&cmd)
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn events(&self, id: &str, from_seq: u64) -> Events {
        let url = format!("ws://{}/session/{id}/events?from_seq={from_seq}", self.base);
        let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
        Events { ws }
    }
}

struct Events {
    ws: tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
}

impl Events {
    async fn next(&mut self) -> Value {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(10), self.ws.next())
                .await
                .expect("event within 10s")
                .expect("stream open")
                .unwrap();
            if let Message::Text(t) = msg {
                return serde_json::from_str(&t).unwrap();
            }
        }
    }

    /// Reads until `pred` matches, checking seq numbers are gapless.
    async fn until(&mut self, last_seq: &mut u64, pred: impl Fn(&Value) -> bool) -> Value {
        loop {
            let e = self.next().await;
            let seq = e["seq"].as_u64().unwrap();
            assert_eq!(seq, *last_seq + 1, "seq gap before {e}");
            *last_seq = seq;
            if pred(&e) {
                return e;
            }
        }
    }
}

fn fast() -> Value {
    json!({"time_ratio": 40.0, "tick_ms": 5})
}

fn registry_has(e: &Value, addr: u64) -> bool {
    e["type"] == "registry_changed" && e["snapshot"].as_array().unwrap().iter().any(|r| r["address"] == addr)
}

#[tokio::test]
async fn plug_set_and_observe() {
    let s = start().await;
    let id = s.session(fast()).await;
    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    let first = ev.until(&mut seq, |_| true).await;
    assert_eq!(first["type"], "registry_changed");
    assert_eq!(first["snapshot"], json!([]));

    let (st, ack) = s.command(&id, json!({"cmd": "plug", "slot": 2, "descriptor": "vibration"})).await;
    assert_eq!(st, StatusCode::OK, "{ack}");
    assert_eq!(ack["ok"], true);

    let reg = ev.until(&mut seq, |e| registry_has(e, 2)).await;
    let entry = &reg["snapshot"][0];
    assert_eq!(entry["variables"].as_array().unwrap().len(), 1);
    assert_eq!(entry["variables"][0]["granularity"], 8);

    let (st, _) = s.command(&id, json!({"cmd": "set", "address": 2, "var_index": 0, "value": 128})).await;
    assert_eq!(st, StatusCode::OK);
    let level = ev.until(&mut seq, |e| e["type"] == "level_changed").await;
    assert_eq!(level["address"], 2);
    assert_eq!(level["level"], 146);
}

#[tokio::test]
async fn rejections_are_reported_and_streamed() {
    let s = start().await;
    let id = s.session(fast()).await;
    let (st, r) = s.command(&id, json!({"cmd": "set", "address": 5, "var_index": 0, "value": 1})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "UnknownModule");

    let (st, r) = s.command(&id, json!({"cmd": "plug", "slot": 9, "descriptor": "fan"})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "InvalidSlot");

    let (st, r) = s.command(&id, json!({"cmd": "plug", "slot": 1, "descriptor": "toaster"})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "UnknownDescriptor");

    let (st, r) = s.command(&id, json!({"cmd": "warp"})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert_eq!(r["rejected"], "MalformedCommand");

    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    let e = ev.until(&mut seq, |e| e["type"] == "command_rejected").await;
    assert_eq!(e["reason"], "UnknownModule");
    let e = ev.until(&mut seq, |e| e["type"] == "command_rejected").await;
    assert_eq!(e["reason"], "InvalidSlot");
}

#[tokio::test]
async fn unknown_session_and_bad_config() {
    let s = start().await;
    let (st, r) = s.command("no-such-session", json!({"cmd": "clear_map"})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
    assert_eq!(r["error"], "UnknownSession");

    let url = format!("ws://{}/session/no-such-session/events", s.base);
    assert!(tokio_tungstenite::connect_async(url).await.is_err());

    let r = s
        .http
        .post(format!("http://{}/session", s.base))
        .json(&json!({"bus": {"slots": 0}}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    assert_eq!(r.json::<Value>().await.unwrap()["error"], "InvalidConfig");

    let r = s.http.post(format!("http://{}/session", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CREATED);
}

#[tokio::test]
async fn resume_from_seq() {
    let s = start().await;
    let id = s.session(fast()).await;
    s.command(&id, json!({"cmd": "plug", "slot": 1, "descriptor": "fan"})).await;
    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    let mut seen = Vec::new();
    for _ in 0..6 {
        seen.push(ev.until(&mut seq, |_| true).await);
    }
    drop(ev);

    let mut again = s.events(&id, 4).await;
    for expected in &seen[3..] {
        assert_eq!(&again.next().await, expected);
    }
    let log: Vec<Value> = s
        .http
        .get(format!("http://{}/session/{id}/log?from_seq=2", s.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(log[0]["seq"], 2);
    assert_eq!(&log[..5], &seen[1..]);
}

#[tokio::test]
async fn unplug_is_detected_within_bound() {
    let s = start().await;
    let id = s.session(json!({"time_ratio": 100.0, "tick_ms": 5})).await;
    s.command(&id, json!({"cmd": "plug", "slot": 3, "descriptor": "heater"})).await;
    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    ev.until(&mut seq, |e| registry_has(e, 3)).await;
    let (st, ack) = s.command(&id, json!({"cmd": "unplug", "slot": 3})).await;
    assert_eq!(st, StatusCode::OK);
    let t0 = ack["time"].as_u64().unwrap();
    let d = ev.until(&mut seq, |e| e["type"] == "disconnect_detected").await;
    assert_eq!(d["address"], 3);
    let latency = d["time"].as_u64().unwrap() - t0;
    assert!(latency <= 2000, "detected after {latency} ms");
    let reg = ev.until(&mut seq, |e| e["type"] == "registry_changed").await;
    assert_eq!(reg["snapshot"], json!([]));
}

#[tokio::test]
async fn csv_mapping_replay_drives_levels() {
    let s = start().await;
    let id = s.session(json!({"time_ratio": 100.0, "tick_ms": 5})).await;
    s.command(&id, json!({"cmd": "plug", "slot": 1, "descriptor": "fan"})).await;
    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    ev.until(&mut seq, |e| registry_has(e, 1)).await;

    let (st, _) = s.command(&id, json!({"cmd": "load_csv", "csv": "t,speed\n0,0\n1,50\n2,100\n"})).await;
    assert_eq!(st, StatusCode::OK);
    let (st, r) = s
        .command(&id, json!({"cmd": "map", "rules": [{"column": "speed", "address": 1, "var_index": 0}]}))
        .await;
    assert_eq!(st, StatusCode::OK, "{r}");
    let (st, _) = s.command(&id, json!({"cmd": "replay", "cadence_ms": 100})).await;
    assert_eq!(st, StatusCode::OK);

    let mut levels = Vec::new();
    while levels.len() < 3 {
        let e = ev.until(&mut seq, |e| e["type"] == "level_changed").await;
        levels.push(e["level"].as_u64().unwrap());
    }
    assert_eq!(levels, vec![0, 50, 100]);

    let (st, r) = s.command(&id, json!({"cmd": "load_csv", "csv": "a,b\n1\n"})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "MalformedCsv");
}

#[tokio::test]
async fn descriptors_and_state() {
    let s = start().await;
    let d: Value = s.http.get(format!("http://{}/descriptors", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(d["vibration"]["variables"][0]["granularity"], 8);

    let id = s.session(fast()).await;
    s.command(
        &id,
        json!({"cmd": "plug", "slot": 4, "descriptor": {"module_name": "dial", "variables": [
            {"name": "angle", "min": 0, "max": 90, "granularity": 4, "index": 0}
        ]}}),
    )
    .await;
    let st: Value = s.http.get(format!("http://{}/session/{id}", s.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(st["rows"], 2);
    assert_eq!(st["slots"][3]["module"], "dial");
    assert_eq!(st["slots"][3]["levels"], json!([0]));
    assert_eq!(st["slots"][0]["module"], Value::Null);

    let r = s.http.delete(format!("http://{}/session/{id}", s.base)).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::NO_CONTENT);
    let (st, _) = s.command(&id, json!({"cmd": "clear_map"})).await;
    assert_eq!(st, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_are_independent() {
    let s = start().await;
    let a = s.session(fast()).await;
    let b = s.session(fast()).await;
    assert_ne!(a, b);
    s.command(&a, json!({"cmd": "plug", "slot": 1, "descriptor": "fan"})).await;
    let mut ev = s.events(&a, 1).await;
    let mut seq = 0;
    ev.until(&mut seq, |e| registry_has(e, 1)).await;

    let (st, r) = s.command(&b, json!({"cmd": "unplug", "slot": 1})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "SlotEmpty");
    let (st, r) = s.command(&b, json!({"cmd": "set", "address": 1, "var_index": 0, "value": 10})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "UnknownModule");
}

#[tokio::test]
async fn out_of_range_set_is_rejected() {
    let s = start().await;
    let id = s.session(fast()).await;
    s.command(&id, json!({"cmd": "plug", "slot": 5, "descriptor": "heater"})).await;
    let mut ev = s.events(&id, 0).await;
    let mut seq = 0;
    ev.until(&mut seq, |e| registry_has(e, 5)).await;
    let (st, r) = s.command(&id, json!({"cmd": "set", "address": 5, "var_index": 0, "value": 90})).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["rejected"], "ValueOutOfRange");
    let e = ev.until(&mut seq, |e| e["type"] == "command_rejected").await;
    assert_eq!(e["reason"], "ValueOutOfRange");
}

/// Two overlapping subscriptions, merged with client-side dedup, cover every
/// seq from 1 without a gap.
#[tokio::test]
async fn reconnect_leaves_no_gaps() {
    let s = start().await;
    let id = s.session(json!({"time_ratio": 100.0, "tick_ms": 5})).await;
    for slot in 1..=3 {
        s.command(&id, json!({"cmd": "plug", "slot": slot, "descriptor": "vibration"})).await;
    }
    let mut seen = std::collections::BTreeMap::new();
    let mut first = s.events(&id, 1).await;
    for _ in 0..25 {
        let e = first.next().await;
        seen.insert(e["seq"].as_u64().unwrap(), e);
    }
    let last = *seen.keys().next_back().unwrap();
    drop(first);
    // let more happen while disconnected, then resume a little early
    s.command(&id, json!({"cmd": "unplug", "slot": 2})).await;
    tokio::time::sleep(Duration::from_millis(50)).await;
    let mut second = s.events(&id, last - 3).await;
    let mut prev = 0;
    for _ in 0..40 {
        let e = second.next().await;
        let seq = e["seq"].as_u64().unwrap();
        assert!(seq > prev, "out of order");
        prev = seq;
        if let Some(old) = seen.get(&seq) {
            assert_eq!(old, &e, "redelivered event changed");
        }
        seen.insert(seq, e);
    }
    let seqs: Vec<u64> = seen.keys().copied().collect();
    assert_eq!(seqs, (1..=seqs.len() as u64).collect::<Vec<_>>());
    assert!(seqs.len() >= 60);
}
