//! The `/session` WebSocket service.
//!
//! One connection owns one [`Session`]. Frames are handled strictly in
//! arrival order; the session itself runs on the blocking pool because an
//! external detector may block on HTTP.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use dwellgrasp_core::fixation::TriggerMode;
use dwellgrasp_core::geometry::pixel_to_world;
use dwellgrasp_core::intent::ResolvePolicy;
use dwellgrasp_core::orchestrator::{
    EventLogRecord, Input, Session, SessionConfig, SessionError, SessionEvent, SessionPhase,
};
use dwellgrasp_core::perception::{rescale, ImageResolution};
use dwellgrasp_core::simworld::{RobotPhase, Scene};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::protocol::{
    salvage_seq, Envelope, ErrorCode, ErrorPayload, GazePayload, HelloPayload, PointerPayload,
    ThrottlePayload, TimePayload,
};

pub const DEFAULT_RATE_LIMIT: u32 = 200;
const MAX_FRAME_BYTES: usize = 64 * 1024;
const IDLE_POLL: Duration = Duration::from_millis(50);
/// Client silence after which the server advances the arm on its own.
const IDLE_AFTER: Duration = Duration::from_millis(200);
/// Server-estimated time stays this far behind the extrapolated client clock.
const IDLE_MARGIN_MS: u64 = 100;
const CLOSED_HISTORY: usize = 64;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub scene: Scene,
    pub session: SessionConfig,
    pub rate_limit_per_s: u32,
    pub static_dir: Option<PathBuf>,
}

impl ServeConfig {
    pub fn new(scene: Scene, session: SessionConfig) -> Self {
        Self {
            scene,
            session,
            rate_limit_per_s: DEFAULT_RATE_LIMIT,
            static_dir: None,
        }
    }
}

/// How a connection's session ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClosedSession {
    pub session: String,
    pub phase: SessionPhase,
    pub robot_phase: RobotPhase,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServeConfig,
    next_id: AtomicU64,
    closed: Mutex<VecDeque<ClosedSession>>,
}

impl AppState {
    pub fn new(config: ServeConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                next_id: AtomicU64::new(1),
                closed: Mutex::new(VecDeque::new()),
            }),
        }
    }

    pub fn config(&self) -> &ServeConfig {
        &self.inner.config
    }

    /// The most recently closed sessions, oldest first.
    pub fn closed_sessions(&self) -> Vec<ClosedSession> {
        self.inner.closed.lock().unwrap().iter().cloned().collect()
    }

    fn record_closed(&self, closed: ClosedSession) {
        let mut q = self.inner.closed.lock().unwrap();
        if q.len() == CLOSED_HISTORY {
            q.pop_front();
        }
        q.push_back(closed);
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config().static_dir.clone();
    let router = Router::new()
        .route("/session", get(upgrade))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

/// Serves until the listener fails or `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(
        listener,
        router(state).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .with_graceful_shutdown(shutdown)
    .await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> impl IntoResponse {
    ws.max_message_size(MAX_FRAME_BYTES)
        .max_frame_size(MAX_FRAME_BYTES)
        .on_upgrade(move |socket| run_connection(socket, state))
}

async fn run_connection(mut socket: WebSocket, state: AppState) {
    let mut conn = Connection::new(state);
    let mut idle = tokio::time::interval(IDLE_POLL);
    idle.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        let out = tokio::select! {
            frame = socket.recv() => match frame {
                Some(Ok(Message::Close(_))) | Some(Err(_)) | None => break,
                Some(Ok(msg)) => conn.on_frame(msg).await,
            },
            _ = idle.tick() => conn.on_idle().await,
        };
        if send_all(&mut socket, out).await.is_err() {
            break;
        }
    }
    conn.close();
}

async fn send_all(socket: &mut WebSocket, frames: Vec<String>) -> Result<(), axum::Error> {
    for f in frames {
        socket.send(Message::Text(f.into())).await?;
    }
    Ok(())
}

struct RateWindow {
    start: Instant,
    count: u32,
    notified: bool,
}

struct Connection {
    state: AppState,
    opened: Instant,
    session: Option<Session>,
    session_id: String,
    server_seq: u64,
    client_seq: Option<u64>,
    /// Latest client timestamp of any kind and of gaze-like samples.
    client_t: Option<u64>,
    client_sample_t: Option<u64>,
    /// Session time of the latest gaze fed to the session.
    session_gaze_t: Option<u64>,
    last_activity: Instant,
    window: RateWindow,
}

impl Connection {
    fn new(state: AppState) -> Self {
        let now = Instant::now();
        Self {
            state,
            opened: now,
            session: None,
            session_id: String::new(),
            server_seq: 0,
            client_seq: None,
            client_t: None,
            client_sample_t: None,
            session_gaze_t: None,
            last_activity: now,
            window: RateWindow {
                start: now,
                count: 0,
                notified: false,
            },
        }
    }

    fn envelope(&mut self, kind: &str, payload: impl Serialize) -> String {
        self.server_seq += 1;
        let env = Envelope {
            kind: kind.to_string(),
            seq: self.server_seq,
            session: self.session_id.clone(),
            payload: serde_json::to_value(payload).expect("payloads serialize"),
        };
        serde_json::to_string(&env).expect("envelopes serialize")
    }

    fn error(&mut self, code: ErrorCode, message: impl Into<String>, ref_seq: Option<u64>) -> String {
        let payload = ErrorPayload {
            code,
            message: message.into(),
            ref_seq,
            stage: None,
        };
        self.envelope("error", payload)
    }

    /// Counts the frame against the per-second cap; `Err` carries what to
    /// send instead of processing it.
    fn admit(&mut self) -> Result<(), Vec<String>> {
        let limit = self.state.config().rate_limit_per_s;
        let now = Instant::now();
        if now.duration_since(self.window.start) >= Duration::from_secs(1) {
            self.window = RateWindow {
                start: now,
                count: 0,
                notified: false,
            };
        }
        self.window.count += 1;
        if self.window.count <= limit {
            return Ok(());
        }
        if self.window.notified {
            return Err(Vec::new());
        }
        self.window.notified = true;
        let payload = ThrottlePayload {
            limit_per_s: limit,
            window_start_ms: self.window.start.duration_since(self.opened).as_millis() as u64,
        };
        Err(vec![self.envelope("throttle", payload)])
    }

    async fn on_frame(&mut self, msg: Message) -> Vec<String> {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(_) => {
                if let Err(out) = self.admit() {
                    return out;
                }
                return vec![self.error(ErrorCode::Binary, "binary frames are not supported", None)];
            }
            Message::Ping(_) | Message::Pong(_) | Message::Close(_) => return Vec::new(),
        };
        if let Err(out) = self.admit() {
            return out;
        }
        self.last_activity = Instant::now();
        let env: Envelope = match serde_json::from_str(text.as_str()) {
            Ok(env) => env,
            Err(e) => {
                let seq = salvage_seq(text.as_str());
                return vec![self.error(ErrorCode::Malformed, format!("malformed message: {e}"), seq)];
            }
        };
        let seq = Some(env.seq);
        if let Some(last) = self.client_seq {
            if env.seq <= last {
                let msg = format!("seq {} does not follow {last}", env.seq);
                return vec![self.error(ErrorCode::Sequence, msg, seq)];
            }
        }
        self.client_seq = Some(env.seq);

        let kind = env.kind.as_str();
        if !matches!(kind, "hello" | "gaze" | "pointer" | "confirm" | "tick") {
            let msg = format!("unknown message type {kind:?}");
            return vec![self.error(ErrorCode::UnknownType, msg, seq)];
        }
        if kind == "hello" {
            return self.on_hello(env);
        }
        if self.session.is_none() {
            return vec![self.error(ErrorCode::Session, "send hello first", seq)];
        }
        if !env.session.is_empty() && env.session != self.session_id {
            let msg = format!("unknown session {:?}", env.session);
            return vec![self.error(ErrorCode::Session, msg, seq)];
        }
        match self.decode_input(kind, env.payload) {
            Ok((input, stamp)) => self.step(input, Some(stamp), seq).await,
            Err((code, msg)) => vec![self.error(code, msg, seq)],
        }
    }

    fn on_hello(&mut self, env: Envelope) -> Vec<String> {
        let seq = Some(env.seq);
        if self.session.is_some() {
            return vec![self.error(ErrorCode::Session, "session already created", seq)];
        }
        let hello: HelloPayload = match serde_json::from_value(env.payload) {
            Ok(h) => h,
            Err(e) => return vec![self.error(ErrorCode::InvalidPayload, format!("hello: {e}"), seq)],
        };
        let cfg = self.state.config();
        let mut session_config = cfg.session.clone();
        if let Some(mode) = hello.mode {
            session_config.fixation.trigger_mode = mode;
        }
        if let Some(policy) = hello.policy {
            session_config.policy = policy;
        }
        let session = match Session::new(cfg.scene.clone(), session_config.clone()) {
            Ok(s) => s,
            Err(e) => return vec![self.error(ErrorCode::Session, e.to_string(), seq)],
        };
        let id = self.state.inner.next_id.fetch_add(1, Ordering::Relaxed);
        self.session_id = format!("s{id}");
        tracing::info!(session = %self.session_id, client = %hello.client, "session created");
        let payload = SessionCreated {
            session: self.session_id.clone(),
            client: hello.client,
            mode: session_config.fixation.trigger_mode,
            policy: session_config.policy,
            rate_limit_per_s: cfg.rate_limit_per_s,
            scene: &cfg.scene,
            config: &session_config,
        };
        let payload = serde_json::to_value(payload).expect("scene serializes");
        self.session = Some(session);
        vec![self.envelope("session_created", payload)]
    }

    /// Decodes a payload and maps the client timestamp onto session time.
    ///
    /// Client timestamps must not go backwards, and sample timestamps must
    /// strictly increase. Session time is the client time, except that it
    /// never falls behind the session clock, which idle ticks may have
    /// pushed ahead of the client.
    fn decode_input(
        &mut self,
        kind: &str,
        payload: Value,
    ) -> Result<(Input, ClientStamp), (ErrorCode, String)> {
        let bad = |e: serde_json::Error| (ErrorCode::InvalidPayload, format!("{kind}: {e}"));
        let session = self.session.as_ref().expect("checked by caller");
        let (t, sample) = match kind {
            "gaze" => {
                let g: GazePayload = serde_json::from_value(payload).map_err(bad)?;
                (g.t_ms, Some((g.origin, g.dir)))
            }
            "pointer" => {
                let p: PointerPayload = serde_json::from_value(payload).map_err(bad)?;
                (p.t_ms, Some(pointer_ray(session.scene(), p.u, p.v)?))
            }
            _ => {
                let p: TimePayload = serde_json::from_value(payload).map_err(bad)?;
                (p.t_ms, None)
            }
        };
        if let Some(prev) = self.client_t {
            if t < prev {
                return Err((ErrorCode::NonMonotonic, format!("t_ms {t} is before {prev}")));
            }
        }
        if sample.is_some() {
            if let Some(prev) = self.client_sample_t {
                if t <= prev {
                    let msg = format!("sample t_ms {t} does not follow {prev}");
                    return Err((ErrorCode::NonMonotonic, msg));
                }
            }
        }
        let mut eff = session.clock_ms().map_or(t, |c| c.max(t));
        if sample.is_some() {
            if let Some(g) = self.session_gaze_t {
                eff = eff.max(g + 1);
            }
        }
        let stamp = ClientStamp { t_ms: t, sample: sample.is_some() };
        let input = match (kind, sample) {
            (_, Some((origin, dir))) => Input::Gaze { t_ms: eff, origin, dir },
            ("confirm", None) => Input::Confirm { t_ms: eff },
            _ => Input::Tick { t_ms: eff },
        };
        Ok((input, stamp))
    }

    async fn step(
        &mut self,
        input: Input,
        stamp: Option<ClientStamp>,
        ref_seq: Option<u64>,
    ) -> Vec<String> {
        let mut session = self.session.take().expect("checked by caller");
        let (session, result) = tokio::task::spawn_blocking(move || {
            let r = session.step(input);
            (session, r)
        })
        .await
        .expect("session step does not panic");
        self.session = Some(session);
        match result {
            Ok(records) => {
                self.commit(&input, stamp);
                self.forward(records, ref_seq)
            }
            Err(e) => {
                let code = match e {
                    SessionError::NonMonotonic { .. } => ErrorCode::NonMonotonic,
                    _ => ErrorCode::Rejected,
                };
                vec![self.error(code, e.to_string(), ref_seq)]
            }
        }
    }

    /// Remembers the timestamps of an accepted input.
    fn commit(&mut self, input: &Input, stamp: Option<ClientStamp>) {
        if let Input::Gaze { t_ms, .. } = input {
            self.session_gaze_t = Some(*t_ms);
        }
        if let Some(stamp) = stamp {
            self.client_t = Some(stamp.t_ms);
            if stamp.sample {
                self.client_sample_t = Some(stamp.t_ms);
            }
        }
    }

    async fn on_idle(&mut self) -> Vec<String> {
        let Some(session) = self.session.as_ref() else {
            return Vec::new();
        };
        if session.phase() != SessionPhase::Grasping {
            return Vec::new();
        }
        let silent = self.last_activity.elapsed();
        if silent < IDLE_AFTER {
            return Vec::new();
        }
        let Some(base) = self.client_t else {
            return Vec::new();
        };
        let t = (base + silent.as_millis() as u64).saturating_sub(IDLE_MARGIN_MS);
        if session.clock_ms().is_some_and(|c| t <= c) {
            return Vec::new();
        }
        self.step(Input::Tick { t_ms: t }, None, None).await
    }

    fn forward(&mut self, records: Vec<EventLogRecord>, ref_seq: Option<u64>) -> Vec<String> {
        let mut out = Vec::with_capacity(records.len());
        for rec in records {
            match &rec.event {
                SessionEvent::Sample(s) => {
                    let cursor = s.hit.and_then(|[u, v]| self.plane_to_user(u, v));
                    let payload = json!({"t_ms": rec.t_ms, "hit": s.hit, "cursor": cursor});
                    out.push(self.envelope("sample", payload));
                }
                SessionEvent::Error(e) => {
                    let payload = ErrorPayload {
                        code: ErrorCode::Pipeline,
                        message: e.message.clone(),
                        ref_seq,
                        stage: Some(e.stage.clone()),
                    };
                    out.push(self.envelope("error", payload));
                }
                _ => {
                    let mut value = serde_json::to_value(&rec).expect("records serialize");
                    let kind = value["kind"].as_str().unwrap_or_default().to_string();
                    let mut payload = value
                        .get_mut("payload")
                        .map(Value::take)
                        .unwrap_or_else(|| json!({}));
                    if let Some(obj) = payload.as_object_mut() {
                        obj.entry("t_ms").or_insert(json!(rec.t_ms));
                    }
                    out.push(self.envelope(&kind, payload));
                }
            }
        }
        out
    }

    fn plane_to_user(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let scene = self.session.as_ref()?.scene();
        let plane = &scene.headset.plane;
        let from = ImageResolution::new(plane.res_w(), plane.res_h()).ok()?;
        rescale(u, v, from, scene.user_view.resolution)
            .ok()
            .map(|(u, v)| [u, v])
    }

    fn close(&mut self) {
        let Some(mut session) = self.session.take() else {
            return;
        };
        let t = session.clock_ms().unwrap_or(0);
        session.abort(t);
        tracing::info!(session = %self.session_id, "session closed");
        self.state.record_closed(ClosedSession {
            session: self.session_id.clone(),
            phase: session.phase(),
            robot_phase: session.robot_phase(),
        });
    }
}

#[derive(Debug, Clone, Copy)]
struct ClientStamp {
    t_ms: u64,
    sample: bool,
}

#[derive(Serialize)]
struct SessionCreated<'a> {
    session: String,
    client: String,
    mode: TriggerMode,
    policy: ResolvePolicy,
    rate_limit_per_s: u32,
    scene: &'a Scene,
    config: &'a SessionConfig,
}

/// The ray from the headset's virtual eye through a user-view pixel.
pub fn pointer_ray(
    scene: &Scene,
    u: f64,
    v: f64,
) -> Result<(dwellgrasp_core::geometry::Vec3, dwellgrasp_core::geometry::Vec3), (ErrorCode, String)>
{
    let plane = &scene.headset.plane;
    let plane_res = ImageResolution::new(plane.res_w(), plane.res_h())
        .map_err(|e| (ErrorCode::InvalidPayload, e.to_string()))?;
    let (pu, pv) = rescale(u, v, scene.user_view.resolution, plane_res)
        .map_err(|e| (ErrorCode::InvalidPayload, format!("pointer: {e}")))?;
    let eye = scene.headset.eye;
    Ok((eye, pixel_to_world(plane, pu, pv) - eye))
}
