//! Live teleoperation service.
//!
//! A single simulation task owns the [`Simulation`] and advances it at wall
//! clock rate. WebSocket handlers never touch it: operator commands reach the
//! loop through an unbounded channel, and the loop publishes serialized
//! [`StateMessage`] frames on a broadcast channel that every client
//! subscribes to.
//!
//! Endpoints:
//!
//! * `GET /scenario` returns the resolved scenario document.
//! * `/ws` accepts `{"type": "cmd", "v_ref": [...], "client_seq": n}` frames
//!   and streams `{"type": "state", ...}` frames. A malformed frame gets an
//!   `{"type": "error", "message": ...}` reply and is otherwise ignored.
//!
//! Commands are clamped to the bounding box of the input polytope and held
//! until replaced or until the scenario's hold timeout lapses, after which
//! the stopping input applies. With several operators the most recent
//! command wins.

use std::net::SocketAddr;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};

use visifilter::scenario::{ReferenceSpec, Scenario};
use visifilter::sim::{SimError, Simulation, TraceRecord};
use visifilter::trace::FamilyMinima;

#[derive(Debug, Error)]
pub enum TeleopError {
    #[error("teleoperation needs an `external` reference")]
    NotExternal,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Frames sent by a client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Cmd { v_ref: Vec<f64>, client_seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkView {
    pub id: u32,
    pub position: [f64; 3],
    pub visible: bool,
    pub active: bool,
    /// `λ` for active landmarks.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub tick: u64,
    pub t: f64,
    /// Configuration with angles wrapped to `(−π, π]`.
    pub q: Vec<f64>,
    pub camera_heading: f64,
    pub landmarks: Vec<LandmarkView>,
    pub w: f64,
    pub w_hat: f64,
    #[serde(rename = "W")]
    pub w_min: f64,
    pub h_min: FamilyMinima,
    pub v_ref: Vec<f64>,
    pub v_star: Vec<f64>,
    pub event: bool,
    /// Sequence number of the last command applied, if any.
    pub last_client_seq: Option<u64>,
}

/// Frames sent by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(Box<StateMessage>),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    /// State frames per second of simulated time.
    pub broadcast_hz: f64,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { broadcast_hz: 30.0, time_scale: 1.0 }
    }
}

/// A validated operator command on its way to the simulation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub v_ref: Vec<f64>,
    pub client_seq: u64,
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::UnboundedSender<Command>,
    states: broadcast::Sender<String>,
    scenario_json: String,
    input_dim: usize,
}

/// A bound, not yet running, service.
pub struct TeleopServer {
    listener: TcpListener,
    app: Router,
    sim: Simulation,
    commands: mpsc::UnboundedReceiver<Command>,
    states: broadcast::Sender<String>,
    config: SessionConfig,
}

/// Validates `scenario`, builds the simulation and binds `addr`.
pub async fn bind(scenario: Scenario, addr: SocketAddr, config: SessionConfig) -> Result<TeleopServer, TeleopError> {
    if !matches!(scenario.reference, ReferenceSpec::External { .. }) {
        return Err(TeleopError::NotExternal);
    }
    let scenario_json = scenario.to_json();
    let sim = Simulation::new(scenario)?;
    let listener = TcpListener::bind(addr).await.map_err(|source| TeleopError::Bind { addr, source })?;
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let (state_tx, _) = broadcast::channel(64);
    let app_state =
        AppState { commands: cmd_tx, states: state_tx.clone(), scenario_json, input_dim: sim.model().input_dim() };
    let app = Router::new().route("/scenario", get(scenario_handler)).route("/ws", get(ws_handler)).with_state(app_state);
    Ok(TeleopServer { listener, app, sim, commands: cmd_rx, states: state_tx, config })
}

impl TeleopServer {
    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Runs the simulation loop and the HTTP server until the server stops.
    pub async fn serve(self) -> Result<(), TeleopError> {
        let TeleopServer { listener, app, sim, commands, states, config } = self;
        let sim_task = tokio::spawn(session_loop(sim, commands, states, config));
        let result = axum::serve(listener, app).await;
        sim_task.abort();
        result.map_err(TeleopError::from)
    }
}

async fn scenario_handler(State(state): State<AppState>) -> Response {
    ([(axum::http::header::CONTENT_TYPE, "application/json")], state.scenario_json.clone()).into_response()
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client_session(socket, state))
}

/// Parses one client frame into a command of the right dimension.
fn parse_command(text: &str, input_dim: usize) -> Result<Command, String> {
    let msg: ClientMessage = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    let ClientMessage::Cmd { v_ref, client_seq } = msg;
    if v_ref.len() != input_dim {
        return Err(format!("v_ref needs {input_dim} components, got {}", v_ref.len()));
    }
    if v_ref.iter().any(|x| !x.is_finite()) {
        return Err("v_ref components must be finite".into());
    }
    Ok(Command { v_ref, client_seq })
}

fn error_frame(message: String) -> String {
    serde_json::to_string(&ServerMessage::Error { message }).expect("error frame serializes")
}

async fn client_session(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let mut states = state.states.subscribe();
    let (err_tx, mut err_rx) = mpsc::unbounded_channel::<String>();
    let writer = tokio::spawn(async move {
        loop {
            let frame = tokio::select! {
                s = states.recv() => match s {
                    Ok(f) => f,
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                e = err_rx.recv() => match e {
                    Some(f) => f,
                    None => break,
                },
            };
            if sink.send(Message::Text(frame.into())).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            Message::Text(text) => match parse_command(&text, state.input_dim) {
                Ok(cmd) => {
                    if state.commands.send(cmd).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = err_tx.send(error_frame(e));
                }
            },
            Message::Binary(_) => {
                let _ = err_tx.send(error_frame("binary frames are not supported".into()));
            }
            Message::Close(_) => break,
            _ => {}
        }
    }
    drop(err_tx);
    writer.abort();
}

/// Clamps `v` componentwise to the input polytope's bounding box, when the
/// polytope has one.
pub fn clamp_to_box(sim: &Simulation, v: &[f64]) -> DVector<f64> {
    let mut out = DVector::from_column_slice(v);
    if let Some((lo, hi)) = sim.model().input_polytope().bounding_box() {
        for i in 0..out.len() {
            out[i] = out[i].clamp(lo[i], hi[i]);
        }
    }
    out
}

/// State frame for the record just produced by `sim`.
pub fn state_message(sim: &Simulation, record: &TraceRecord, last_client_seq: Option<u64>) -> StateMessage {
    let model = sim.model();
    let vis = sim.visibility();
    let pose = model.eval_sensor_pose(&record.q);
    let landmarks = sim
        .store()
        .iter()
        .map(|l| {
            let slot = record.active_ids.iter().position(|&id| id == l.id);
            let p = pose.inverse_transform_point(&l.position.into()).coords;
            LandmarkView {
                id: l.id.0,
                position: [l.position.x, l.position.y, l.position.z],
                visible: vis.is_visible(&p),
                active: slot.is_some(),
                lambda: slot.map(|i| record.lambda[i]),
            }
        })
        .collect();
    let f = record.family_min;
    StateMessage {
        tick: record.tick,
        t: record.t,
        q: model.wrapped(&record.q).iter().copied().collect(),
        camera_heading: visifilter::kinematics::wrap_angle(model.camera_heading(&record.q)),
        landmarks,
        w: record.w,
        w_hat: record.w_hat,
        w_min: sim.config().params.w_min,
        h_min: FamilyMinima { h1: f[0], h2: f[1], h3: f[2], h4: f[3], h5: f[4], h6: f[5] },
        v_ref: record.v_ref.iter().copied().collect(),
        v_star: record.v_star.iter().copied().collect(),
        event: record.event,
        last_client_seq,
    }
}

/// The simulation loop. Each tick drains pending commands (the last one
/// wins), steps the filter, and publishes a state frame whenever a
/// broadcast period of simulated time has elapsed. After the scenario's
/// duration the loop stops advancing.
pub async fn session_loop(
    mut sim: Simulation,
    mut commands: mpsc::UnboundedReceiver<Command>,
    states: broadcast::Sender<String>,
    config: SessionConfig,
) {
    let dt = sim.config().dt;
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(dt / config.time_scale));
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Burst);
    let period = 1.0 / config.broadcast_hz;
    let mut next_broadcast = 0.0;
    let mut last_seq = None;
    let last_tick = sim.scenario().ticks();
    loop {
        ticker.tick().await;
        let mut latest = None;
        loop {
            match commands.try_recv() {
                Ok(c) => latest = Some(c),
                Err(mpsc::error::TryRecvError::Empty) => break,
                // Every client handle is gone; keep running on the hold.
                Err(mpsc::error::TryRecvError::Disconnected) => break,
            }
        }
        if let Some(c) = latest {
            let v = clamp_to_box(&sim, &c.v_ref);
            sim.submit_command(v);
            last_seq = Some(c.client_seq);
        }
        let advance = sim.tick() < last_tick;
        let record = match sim.step(advance) {
            Ok(r) => r,
            Err(e) => {
                log::error!("simulation stopped: {e}");
                let _ = states.send(error_frame(format!("simulation stopped: {e}")));
                return;
            }
        };
        if record.t + 1e-9 >= next_broadcast || !advance {
            while next_broadcast <= record.t + 1e-9 {
                next_broadcast += period;
            }
            let msg = ServerMessage::State(Box::new(state_message(&sim, &record, last_seq)));
            match serde_json::to_string(&msg) {
                Ok(frame) => {
                    let _ = states.send(frame);
                }
                Err(e) => log::error!("state frame not serializable: {e}"),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use visifilter::scenario::teleop_scenario;

    #[test]
    fn command_parsing() {
        assert!(parse_command(r#"{"type":"cmd","v_ref":[1,0,0],"client_seq":3}"#, 3).is_ok());
        assert!(parse_command(r#"{"type":"cmd","v_ref":[1,0],"client_seq":3}"#, 3).is_err());
        assert!(parse_command(r#"{"type":"noise"}"#, 3).is_err());
        assert!(parse_command("not json", 3).is_err());
        assert!(parse_command(r#"{"type":"cmd","v_ref":[1,0,0]}"#, 3).is_err());
    }

    #[test]
    fn clamping_uses_box() {
        let sim = Simulation::new(teleop_scenario()).unwrap();
        let v = clamp_to_box(&sim, &[5.0, -5.0, 0.5]);
        assert_eq!(v.as_slice(), &[2.0, -2.0, 0.5]);
    }

    #[test]
    fn state_frame_is_finite_and_sandwiched() {
        let mut sim = Simulation::new(teleop_scenario()).unwrap();
        let record = sim.step(true).unwrap();
        let msg = state_message(&sim, &record, None);
        assert!(msg.w_hat >= msg.w_min - 1e-6 && msg.w_hat <= msg.w + 1e-6);
        let json = serde_json::to_value(ServerMessage::State(Box::new(msg))).unwrap();
        assert_eq!(json["type"], "state");
        assert!(json["W"].is_number());
        assert!(json["landmarks"].as_array().unwrap().iter().any(|l| l["active"] == true));
    }

    #[test]
    fn rejects_non_external() {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let sc = visifilter::scenario::example3_scenario(0);
        let r = rt.block_on(bind(sc, "127.0.0.1:0".parse().unwrap(), SessionConfig::default()));
        assert!(matches!(r, Err(TeleopError::NotExternal)));
    }
}
