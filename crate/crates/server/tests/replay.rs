use coachsim_core::artifacts::Artifacts;
use coachsim_core::autonomy::{mode_to_config, SaMode};
use coachsim_core::protocol::{read_runlog, RecordKind};
use coachsim_core::session::{ServerMessage, SessionConfig};
use coachsim_core::sim::{run_trial, ExpertDriver, Sim};
use coachsim_server::{router, AppState};
use futures_util::{SinkExt, StreamExt};
use std::time::Duration;
use tokio_tungstenite::tungstenite::Message;

async fn start(cfg: SessionConfig) -> (String, Artifacts) {
    let art = Artifacts::load(&cfg.artifacts, &cfg.generate).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let state = AppState::new(cfg, art.clone());
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    (format!("ws://{addr}/session"), art)
}

fn parse(m: Message) -> Option<ServerMessage> {
    match m {
        Message::Text(t) => Some(serde_json::from_str(&t).unwrap()),
        _ => None,
    }
}

async fn wait_for(path: &std::path::Path) -> String {
    for _ in 0..200 {
        if let Ok(t) = std::fs::read_to_string(path) {
            if t.contains("aborted") {
                return t;
            }
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    panic!("{} never written", path.display());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn scripted_client_replay_matches_offline_rollout() {
    let out = tempfile::tempdir().unwrap();
    let cfg = SessionConfig {
        lockstep: true,
        out: Some(out.path().to_path_buf()),
        ..SessionConfig::default()
    };
    let (url, art) = start(cfg.clone()).await;
    let mut sim = Sim::new(&art.track, &art.bank, cfg.sim, SaMode::Unassisted).unwrap();
    let offline = run_trial(&mut sim, &mut ExpertDriver, SaMode::Unassisted).unwrap();

    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let first = parse(ws.next().await.unwrap().unwrap()).unwrap();
    let ServerMessage::Track(track) = first else { panic!("expected track first, got {first:?}") };
    assert_eq!(track.version, coachsim_core::session::PROTOCOL_VERSION);
    assert_eq!(track.centerline.len(), art.track.len());
    ws.send(Message::text(r#"{"type":"hello","version":1}"#)).await.unwrap();

    let (mut tx, mut rx) = ws.split();
    let reader = tokio::spawn(async move {
        let mut ticks = Vec::new();
        let mut alphas = Vec::new();
        while let Some(Ok(m)) = rx.next().await {
            if let Some(ServerMessage::State(st)) = parse(m) {
                ticks.push(st.tick);
                alphas.push((st.mode, st.alpha, st.waiting));
            }
        }
        (ticks, alphas)
    });
    for (i, s) in offline.raw.samples.iter().enumerate() {
        let a = s.action;
        let msg = format!(r#"{{"type":"input","steer":{},"throttle":{},"brake":{},"seq":{i}}}"#, a.steer, a.throttle, a.brake);
        tx.send(Message::text(msg)).await.unwrap();
    }
    tx.send(Message::Close(None)).await.unwrap();
    drop(tx);

    let dir = out.path().join("session_000");
    let log = wait_for(&dir.join("runlog.jsonl")).await;
    let records = read_runlog(&log).unwrap();
    assert_eq!(records[0].kind, RecordKind::Trial);
    assert_eq!(records[0].stage, 1);
    assert_eq!(records.last().unwrap().kind, RecordKind::Aborted);
    let written = std::fs::read_to_string(dir.join(records[0].trajectory.as_ref().unwrap())).unwrap();
    let expected = offline.resampled(&art.track).unwrap().to_csv_string().unwrap();
    assert_eq!(written, expected);
    assert_eq!(records[0].metrics.unwrap().lap_time.is_some(), offline.lap_time.is_some());

    let (ticks, alphas) = tokio::time::timeout(Duration::from_secs(5), reader).await.unwrap().unwrap();
    assert!(!ticks.is_empty());
    assert!(ticks.windows(2).all(|w| w[0] < w[1]), "state ticks not monotone");
    for (mode, alpha, _) in alphas {
        let c = mode_to_config(mode);
        assert_eq!((alpha.steer, alpha.throttle, alpha.brake), (c.alpha_steer, c.alpha_throttle, c.alpha_brake));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn version_mismatch_ends_the_session() {
    let (url, _) = start(SessionConfig { lockstep: true, ..SessionConfig::default() }).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    ws.send(Message::text(r#"{"type":"hello","version":42}"#)).await.unwrap();
    ws.send(Message::text("not json")).await.unwrap();
    let mut saw_error = false;
    let mut ended = false;
    while let Ok(Some(Ok(m))) = tokio::time::timeout(Duration::from_secs(5), ws.next()).await {
        match parse(m) {
            Some(ServerMessage::Error { .. }) => saw_error = true,
            Some(ServerMessage::End { aborted, .. }) => {
                assert!(aborted);
                ended = true;
            }
            _ => {}
        }
    }
    assert!(saw_error && ended);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn wall_clock_sessions_stream_states() {
    let (url, _) = start(SessionConfig::default()).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let mut states = Vec::new();
    let t0 = std::time::Instant::now();
    while states.len() < 8 {
        let m = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Some(ServerMessage::State(st)) = parse(m) {
            states.push(st);
        }
    }
    // No input: waiting on the line and flagged stale.
    assert!(states.iter().all(|s| s.waiting && s.stale && s.speed == 0.0));
    assert!(t0.elapsed() >= Duration::from_millis(250));
    ws.send(Message::text(r#"{"type":"input","steer":0,"throttle":1,"brake":0,"seq":1}"#)).await.unwrap();
    let mut moving = None;
    while moving.is_none() {
        let m = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap().unwrap().unwrap();
        if let Some(ServerMessage::State(st)) = parse(m) {
            if st.seq == Some(1) && !st.waiting {
                moving = Some(st);
            }
        }
    }
    assert!(!moving.unwrap().stale);
}
