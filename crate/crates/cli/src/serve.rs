//! Real-time procedure behind a WebSocket operator console.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anastomosis_core::bus::LogEntry;
use anastomosis_core::config::GlobalConfig;
use anastomosis_core::console::{
    prompt_message, AckStatus, ConsoleKind, ConsoleMessage, ConsolePolicy, DecisionPayload, MessageSequencer,
    PromptBroker, SnapshotTracker, StateSnapshot,
};
use anastomosis_core::controller::{
    run_procedure, run_seed, AScanView, CameraPairView, ProcedureHooks, ProcedureObserver, ProcedureOutput, Scenario,
    ControllerError, CH_PROMPT,
};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};

use crate::error::{CliError, Result};

pub const INDEX_HTML: &str = include_str!("../assets/index.html");
const BROADCAST_CAPACITY: usize = 4096;
const HEARTBEAT: Duration = Duration::from_secs(1);

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub scenario: Scenario,
    /// Logical milliseconds per wall-clock millisecond.
    pub speedup: f64,
    pub exit_when_done: bool,
}

#[derive(Default)]
struct HubState {
    tracker: SnapshotTracker,
    sequencer: MessageSequencer,
    last_ascan: Option<ConsoleMessage>,
    last_pair: Option<ConsoleMessage>,
}

/// Fan-out point between the procedure thread and console sockets.
///
/// Messages are numbered and broadcast under one lock, so a socket that
/// subscribes while holding it sees neither gaps nor duplicates.
pub struct Hub {
    state: Mutex<HubState>,
    tx: broadcast::Sender<String>,
    broker: PromptBroker,
}

impl Hub {
    pub fn new() -> Arc<Self> {
        let (tx, _) = broadcast::channel(BROADCAST_CAPACITY);
        Arc::new(Self {
            state: Mutex::new(HubState::default()),
            tx,
            broker: PromptBroker::new(),
        })
    }

    pub fn broker(&self) -> &PromptBroker {
        &self.broker
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.lock().tracker.snapshot().clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HubState> {
        self.state.lock().expect("hub lock")
    }

    fn send(&self, msg: &ConsoleMessage) {
        // No subscribers is fine.
        let _ = self.tx.send(msg.to_json());
    }

    fn on_log(&self, e: &LogEntry) {
        let mut st = self.lock();
        if !st.tracker.apply(e) {
            return;
        }
        if e.channel == CH_PROMPT {
            if let Some(p) = st.tracker.snapshot().prompt.clone() {
                self.broker.open(p.clone());
                let msg = prompt_message(&mut st.sequencer, &p);
                self.send(&msg);
            }
        }
        let snap = st.tracker.snapshot().clone();
        let msg = st.sequencer.snapshot(&snap);
        self.send(&msg);
    }

    fn heartbeat(&self) {
        let mut st = self.lock();
        let snap = st.tracker.snapshot().clone();
        let msg = st.sequencer.snapshot(&snap);
        self.send(&msg);
    }

    fn view(&self, kind: ConsoleKind, t: u64, payload: serde_json::Value) {
        let mut st = self.lock();
        let msg = st.sequencer.message(kind, t, payload);
        self.send(&msg);
        match kind {
            ConsoleKind::AScanFrame => st.last_ascan = Some(msg),
            _ => st.last_pair = Some(msg),
        }
    }

    fn finish(&self, aborted: Option<String>) {
        let mut st = self.lock();
        let mut snap = st.tracker.snapshot().clone();
        snap.finished = true;
        if snap.aborted.is_none() {
            snap.aborted = aborted;
        }
        let msg = st.sequencer.snapshot(&snap);
        self.send(&msg);
    }

    /// Subscribes and returns the catch-up messages for a new socket.
    fn connect(&self) -> (broadcast::Receiver<String>, Vec<String>) {
        let mut st = self.lock();
        let rx = self.tx.subscribe();
        let snap = st.tracker.snapshot().clone();
        let mut initial = vec![st.sequencer.snapshot(&snap).to_json()];
        if let Some(p) = self.broker.outstanding() {
            initial.push(prompt_message(&mut st.sequencer, &p).to_json());
        }
        initial.extend(st.last_ascan.iter().chain(&st.last_pair).map(ConsoleMessage::to_json));
        (rx, initial)
    }

    fn handle_incoming(&self, text: &str) -> String {
        let (prompt_seq, status, message) = match ConsoleMessage::parse(text) {
            Err(e) => (None, AckStatus::Invalid, Some(e.to_string())),
            Ok(msg) => match DecisionPayload::from_message(&msg) {
                Err(e) => (None, AckStatus::Invalid, Some(e.to_string())),
                Ok(d) => (Some(d.prompt_seq), self.broker.submit(d.prompt_seq, d.decision), None),
            },
        };
        let mut st = self.lock();
        let t = st.tracker.snapshot().logical_time_ms;
        st.sequencer.ack(t, prompt_seq, status, message).to_json()
    }
}

struct HubObserver(Arc<Hub>);

impl ProcedureObserver for HubObserver {
    fn ascan(&mut self, view: &AScanView) {
        self.0.view(ConsoleKind::AScanFrame, view.logical_time_ms, serde_json::to_value(view).expect("view serializes"));
    }

    fn camera_pair(&mut self, view: &CameraPairView) {
        self.0.view(ConsoleKind::CameraPair, view.logical_time_ms, serde_json::to_value(view).expect("view serializes"));
    }
}

pub fn router(hub: Arc<Hub>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/index.html", get(index))
        .route("/ws", get(ws_upgrade))
        .with_state(hub)
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| session(socket, hub))
}

async fn session(socket: WebSocket, hub: Arc<Hub>) {
    let (mut sink, mut stream) = socket.split();
    let (mut rx, initial) = hub.connect();
    for text in initial {
        if sink.send(Message::Text(text.into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            out = rx.recv() => {
                let text = match out {
                    Ok(t) => t,
                    Err(broadcast::error::RecvError::Lagged(_)) => {
                        let mut st = hub.lock();
                        let snap = st.tracker.snapshot().clone();
                        st.sequencer.snapshot(&snap).to_json()
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                };
                if sink.send(Message::Text(text.into())).await.is_err() {
                    break;
                }
            }
            incoming = stream.next() => {
                let reply = match incoming {
                    Some(Ok(Message::Text(t))) => hub.handle_incoming(t.as_str()),
                    Some(Ok(Message::Binary(_))) => hub.handle_incoming(""),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                if sink.send(Message::Text(reply.into())).await.is_err() {
                    break;
                }
            }
        }
    }
}

/// Serves the console on `listener` while one procedure runs in a worker
/// thread. Returns the procedure output once the server stops, or `None` if
/// the procedure had not finished.
pub async fn serve_on(
    listener: TcpListener,
    cfg: GlobalConfig,
    opts: ServeOptions,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<Option<ProcedureOutput>> {
    if !(opts.speedup > 0.0) {
        return Err(CliError::Config("--speedup must be positive".into()));
    }
    let hub = Hub::new();
    let (done_tx, mut done_rx) = watch::channel(false);

    let worker = {
        let hub = hub.clone();
        let speedup = opts.speedup;
        std::thread::spawn(move || {
            let log_hub = hub.clone();
            let hooks = ProcedureHooks {
                on_log: Some(Box::new(move |e: &LogEntry| log_hub.on_log(e))),
                on_advance: Some(Box::new(move |from: u64, to: u64| {
                    let ms = to.saturating_sub(from) as f64 / speedup;
                    if ms >= 0.001 {
                        std::thread::sleep(Duration::from_secs_f64(ms / 1000.0));
                    }
                })),
                observer: Some(Box::new(HubObserver(hub.clone()))),
            };
            let mut policy = ConsolePolicy::new(hub.broker().clone());
            let seed = run_seed(cfg.seed, 0);
            let res = run_procedure(&cfg, 0, seed, &opts.scenario, &mut policy, hooks);
            hub.finish(res.as_ref().err().map(ToString::to_string));
            let _ = done_tx.send(true);
            res
        })
    };

    let heartbeat = {
        let hub = hub.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(HEARTBEAT);
            tick.tick().await;
            loop {
                tick.tick().await;
                hub.heartbeat();
            }
        })
    };

    let exit_when_done = opts.exit_when_done;
    let stop = async move {
        tokio::select! {
            _ = shutdown => {}
            _ = async {
                if exit_when_done {
                    let _ = done_rx.wait_for(|d| *d).await;
                } else {
                    std::future::pending::<()>().await;
                }
            } => {}
        }
    };
    let served = axum::serve(listener, router(hub.clone())).with_graceful_shutdown(stop).await;
    heartbeat.abort();
    hub.broker().close();
    served.map_err(|e| CliError::Runtime(format!("server: {e}")))?;

    let joined = tokio::task::spawn_blocking(move || worker.join())
        .await
        .map_err(|e| CliError::Runtime(format!("worker: {e}")))?
        .map_err(|_| CliError::Runtime("procedure thread panicked".into()))?;
    match joined {
        Ok(out) => Ok(Some(out)),
        Err(ControllerError::Policy(e)) => {
            eprintln!("procedure stopped: {e}");
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

/// Binds `host:port` and serves until ctrl-c (or completion with
/// `exit_when_done`).
pub async fn serve(cfg: GlobalConfig, host: &str, port: u16, opts: ServeOptions) -> Result<Option<ProcedureOutput>> {
    let listener = TcpListener::bind((host, port))
        .await
        .map_err(|e| CliError::Io(format!("bind {host}:{port}: {e}")))?;
    let addr: SocketAddr = listener.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    crate::commands::emit(&format!("console listening on http://{addr}/ (ws://{addr}/ws)"));
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve_on(listener, cfg, opts, ctrl_c).await
}
