use std::time::Instant;

use webguard_client::{Client, ClientError, ReplayOptions};
use webguard_core::ingest::{SessionStore, TransportMode};
use webguard_core::simulate::{Generator, SimConfig};
use webguard_core::trace::Trace;
use webguard_server::serve;

fn sim(generator: Generator, seed: u64, sid: &str, duration: f64) -> Trace {
    generator
        .generate(&SimConfig {
            seed,
            session_id: sid.into(),
            duration,
            ..SimConfig::default()
        })
        .unwrap()
}

#[tokio::test]
async fn both_transports_deliver_identical_sessions() {
    let server = serve("127.0.0.1:0", SessionStore::new()).await.unwrap();
    let client = Client::new(&server.url()).unwrap();
    let ws = sim(Generator::Humanlike, 1, "via-ws", 10.0);
    let http = Trace::new(
        "via-http",
        ws.records()
            .iter()
            .cloned()
            .map(|mut r| {
                r.session_id = "via-http".into();
                r
            })
            .collect(),
    )
    .unwrap();

    let a = client.replay(&ws, &ReplayOptions::default()).await.unwrap();
    let b = client
        .replay(
            &http,
            &ReplayOptions {
                transport: TransportMode::Http,
                ..ReplayOptions::default()
            },
        )
        .await
        .unwrap();
    assert_eq!(a.events, ws.len());
    assert_eq!(a.batches, b.batches);
    // The session ids differ by two characters, the payloads by two bytes per batch.
    assert_eq!(a.overhead.payload_bytes + 2 * a.batches, b.overhead.payload_bytes);

    let back_ws = client.trace("via-ws").await.unwrap().unwrap();
    let back_http = client.trace("via-http").await.unwrap().unwrap();
    assert_eq!(back_ws.records(), ws.records());
    assert_eq!(back_http.records(), http.records());
    assert!(client.trace("missing").await.unwrap().is_none());

    let sessions = client.sessions().await.unwrap();
    let ids: Vec<&str> = sessions.iter().map(|s| s.sid.as_str()).collect();
    assert_eq!(ids, ["via-ws", "via-http"]);
    assert_eq!(sessions[0].meta.events, ws.len());

    let seen = client.overhead().await.unwrap();
    assert_eq!(seen.websocket.messages, a.batches);
    assert_eq!(seen.websocket.framing_bytes, a.overhead.framing_bytes);
    assert_eq!(seen.http.messages, b.batches);
    assert_eq!(client.export().await.unwrap().len(), 2);
    assert!(client.verdict("via-ws").await.unwrap().is_none());
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn replaying_twice_is_rejected() {
    let server = serve("127.0.0.1:0", SessionStore::new()).await.unwrap();
    let client = Client::new(&server.url()).unwrap();
    let trace = sim(Generator::Crawler, 2, "again", 2.0);
    client.replay(&trace, &ReplayOptions::default()).await.unwrap();
    let err = client.replay(&trace, &ReplayOptions::default()).await.unwrap_err();
    assert!(matches!(err, ClientError::Rejected(n, _) if n > 0), "{err}");
    let http = ReplayOptions {
        transport: TransportMode::Http,
        ..ReplayOptions::default()
    };
    let err = client.replay(&trace, &http).await.unwrap_err();
    assert!(matches!(err, ClientError::Status { status: 409, .. }), "{err}");
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn time_scale_paces_the_replay() {
    let server = serve("127.0.0.1:0", SessionStore::new()).await.unwrap();
    let client = Client::new(&server.url()).unwrap();
    let trace = sim(Generator::Scanner, 3, "paced", 1.0);
    let opts = ReplayOptions {
        time_scale: 0.5,
        ..ReplayOptions::default()
    };
    let started = Instant::now();
    client.replay(&trace, &opts).await.unwrap();
    let last_batch_t = webguard_core::ingest::batch_trace(&trace, opts.policy)
        .last()
        .unwrap()
        .ev[0]
        .t
        - trace.start_time();
    assert!(last_batch_t > 0);
    assert!(started.elapsed().as_secs_f64() * 1000.0 >= 0.5 * last_batch_t as f64);
    server.shutdown().await.unwrap();
}
