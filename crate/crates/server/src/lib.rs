//! Websocket host for live sessions. Each connection gets its own session
//! thread ticking at the sim rate; the socket reader and writer talk to it
//! through queues. Inputs are never dropped, states are newest-wins.

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use coachsim_core::artifacts::Artifacts;
use coachsim_core::session::{ClientMessage, ServerMessage, Session, SessionConfig, StateMessage};
use coachsim_core::{Error, Result};
use futures_util::{SinkExt, StreamExt};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};
use tokio::sync::{mpsc, watch};

#[derive(Clone)]
pub struct AppState {
    pub cfg: Arc<SessionConfig>,
    pub art: Arc<Artifacts>,
    next_id: Arc<AtomicUsize>,
}

impl AppState {
    pub fn new(cfg: SessionConfig, art: Artifacts) -> Self {
        Self {
            cfg: Arc::new(cfg),
            art: Arc::new(art),
            next_id: Arc::new(AtomicUsize::new(0)),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/session", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(state)
}

/// Serves until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| Error::runtime(e.to_string()))?;
    tracing::info!(%addr, "serving sessions at ws://{addr}/session");
    axum::serve(listener, router(state))
        .await
        .map_err(|e| Error::runtime(e.to_string()))
}

pub async fn bind(port: u16) -> Result<tokio::net::TcpListener> {
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::runtime(format!("cannot bind {addr}: {e}")))
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, state))
}

async fn connection(socket: WebSocket, state: AppState) {
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    let (inputs_tx, inputs_rx) = mpsc::unbounded_channel();
    let (events_tx, mut events_rx) = mpsc::unbounded_channel();
    let (states_tx, mut states_rx) = watch::channel::<Option<StateMessage>>(None);
    let cfg = state.cfg.clone();
    let art = state.art.clone();
    let sim = std::thread::spawn(move || {
        let outcome = session_loop(&cfg, &art, id, inputs_rx, &states_tx, &events_tx);
        if let Err(e) = &outcome {
            tracing::warn!(session = id, "session failed: {e}");
            let _ = events_tx.send(ServerMessage::Error { message: e.to_string() });
        }
    });

    let (mut sink, mut stream) = socket.split();
    let reader = {
        let events = inputs_tx;
        async move {
            while let Some(Ok(msg)) = stream.next().await {
                match msg {
                    Message::Text(text) => match serde_json::from_str::<ClientMessage>(&text) {
                        Ok(m) => {
                            if events.send(Ok(m)).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            let _ = events.send(Err(format!("bad message: {e}")));
                        }
                    },
                    Message::Close(_) => break,
                    _ => {}
                }
            }
            // Dropping the sender tells the session the client is gone.
        }
    };
    let writer = async move {
        let mut states_open = true;
        loop {
            tokio::select! {
                biased;
                ev = events_rx.recv() => match ev {
                    Some(ev) => {
                        let end = matches!(ev, ServerMessage::End { .. });
                        if send(&mut sink, &ev).await.is_err() {
                            break;
                        }
                        if end {
                            let _ = sink.send(Message::Close(None)).await;
                            break;
                        }
                    }
                    None => break,
                },
                changed = states_rx.changed(), if states_open => match changed {
                    Ok(()) => {
                        let st = states_rx.borrow_and_update().clone();
                        if let Some(st) = st {
                            if send(&mut sink, &ServerMessage::State(st)).await.is_err() {
                                break;
                            }
                        }
                    }
                    Err(_) => states_open = false,
                },
            }
        }
    };
    tokio::select! {
        _ = reader => {}
        _ = writer => {}
    }
    let _ = tokio::task::spawn_blocking(move || sim.join()).await;
}

async fn send(sink: &mut futures_util::stream::SplitSink<WebSocket, Message>, msg: &ServerMessage) -> std::result::Result<(), ()> {
    let text = serde_json::to_string(msg).map_err(|_| ())?;
    sink.send(Message::Text(text.into())).await.map_err(|_| ())
}

type Inbound = std::result::Result<ClientMessage, String>;

fn session_loop(
    cfg: &SessionConfig,
    art: &Artifacts,
    id: usize,
    mut inputs: mpsc::UnboundedReceiver<Inbound>,
    states: &watch::Sender<Option<StateMessage>>,
    events: &mpsc::UnboundedSender<ServerMessage>,
) -> Result<()> {
    let mut s = Session::new(cfg.clone(), art, id)?;
    let _ = events.send(ServerMessage::Track(s.track_message()));
    let dt = Duration::from_secs_f64(cfg.sim.dt);
    let mut deadline = Instant::now();
    let apply = |s: &mut Session<'_>, m: Inbound| -> bool {
        let input = matches!(m, Ok(ClientMessage::Input { .. }));
        let hello = matches!(m, Ok(ClientMessage::Hello { .. }));
        match m.map_err(Error::invalid).and_then(|m| s.handle(m)) {
            Ok(()) => input,
            Err(e) => {
                let _ = events.send(ServerMessage::Error { message: e.to_string() });
                if hello {
                    s.abort(&e.to_string());
                }
                false
            }
        }
    };
    'run: while !s.is_done() {
        if cfg.lockstep {
            match inputs.blocking_recv() {
                None => {
                    s.abort("client disconnected");
                    break 'run;
                }
                Some(m) => {
                    if !apply(&mut s, m) || s.is_done() {
                        forward(&mut s, events);
                        continue;
                    }
                }
            }
        } else {
            deadline += dt;
            let now = Instant::now();
            if deadline > now {
                std::thread::sleep(deadline - now);
            } else if now - deadline > dt * 10 {
                // Fell far behind; do not try to catch up in a burst.
                deadline = now;
            }
            loop {
                match inputs.try_recv() {
                    Ok(m) => {
                        apply(&mut s, m);
                    }
                    Err(mpsc::error::TryRecvError::Empty) => break,
                    Err(mpsc::error::TryRecvError::Disconnected) => {
                        s.abort("client disconnected");
                        break 'run;
                    }
                }
            }
            if s.is_done() {
                break;
            }
        }
        let st = s.tick()?;
        states.send_replace(Some(st));
        forward(&mut s, events);
    }
    forward(&mut s, events);
    if let Some(out) = &cfg.out {
        let dir = out.join(format!("session_{id:03}"));
        s.write(&dir)?;
        tracing::info!(session = id, dir = %dir.display(), "session saved");
    }
    Ok(())
}

fn forward(s: &mut Session<'_>, events: &mpsc::UnboundedSender<ServerMessage>) {
    for e in s.drain_events() {
        let _ = events.send(e);
    }
}
