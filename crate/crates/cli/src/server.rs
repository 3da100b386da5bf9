//! HTTP and websocket service that streams interactive rollouts to a human
//! helper. Each session owns one rollout driver; the model is shared.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cofine_core::conformal::Threshold;
use cofine_core::evaluation::{DriverEvent, DriverStatus, EvalError, HelpResponse, Outcome, RolloutDriver};
use cofine_core::gridworld::{sample_scenario, Action, DistributionTag, Scenario};
use cofine_core::model::ConfidenceModel;

use crate::protocol::{
    ClientMessage, Envelope, ErrorBody, ExecutedAction, GridSnapshot, PendingHelp, ServerEvent, SessionCreated,
    SessionSnapshot, SessionStatus, StartSession, ValidationKind, SCHEMA_VERSION,
};

pub type SharedModel = Arc<dyn ConfidenceModel<f64> + Send + Sync>;

/// Where new sessions take their scenarios from.
#[derive(Debug, Clone)]
pub enum ScenarioSource {
    Sampled(DistributionTag),
    List(Vec<Scenario>),
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    /// How long a session waits for a disconnected client before aborting.
    pub disconnect_timeout: Duration,
    pub max_steps: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            disconnect_timeout: Duration::from_secs(300),
            max_steps: None,
        }
    }
}

struct Session {
    id: u64,
    driver: RolloutDriver<f64>,
    started: bool,
    connected: bool,
    /// Bumped on every connection so a stale disconnect timer can tell it
    /// has been superseded.
    generation: u64,
    last_executed: Option<ExecutedAction>,
}

impl Session {
    fn status(&self) -> SessionStatus {
        match self.driver.status() {
            DriverStatus::Finished(_) => SessionStatus::Finished,
            DriverStatus::AwaitingHelp => SessionStatus::AwaitingHelp,
            DriverStatus::Running if !self.started => SessionStatus::Idle,
            DriverStatus::Running => SessionStatus::Running,
        }
    }

    fn outcome(&self) -> Option<Outcome> {
        match self.driver.status() {
            DriverStatus::Finished(o) => Some(o),
            _ => None,
        }
    }

    fn state_update(&self) -> ServerEvent {
        ServerEvent::StateUpdate {
            session_id: self.id,
            status: self.status(),
            step: self.driver.step_index(),
            mission: self.driver.scenario().task.mission_text.clone(),
            grid_snapshot: GridSnapshot::of(self.driver.env()),
            history: self.driver.history().iter().map(|a| a.index()).collect(),
            last_executed: self.last_executed.clone(),
        }
    }

    fn help_request(&self) -> Option<ServerEvent> {
        let p = self.driver.pending()?;
        Some(ServerEvent::HelpRequest {
            session_id: self.id,
            step: p.step,
            prompt_text: p.prompt_text.clone(),
            grid_snapshot: GridSnapshot::of(self.driver.env()),
            prediction_set: p.prediction_set.actions.iter().map(|a| a.index()).collect(),
            confidences: p.confidences,
            delta: self.driver.threshold().delta,
        })
    }

    fn finished(&self) -> Option<ServerEvent> {
        let outcome = self.outcome()?;
        let trace = self.driver.trace();
        Some(ServerEvent::Finished {
            session_id: self.id,
            outcome,
            steps_taken: trace.steps_taken,
            help_count: trace.help_count(),
        })
    }

    fn validation(&self, error: ValidationKind, message: String) -> ServerEvent {
        ServerEvent::Validation {
            session_id: self.id,
            error,
            message,
            pending_step: self.driver.pending().map(|p| p.step),
        }
    }

    fn snapshot(&self) -> SessionSnapshot {
        let trace = self.driver.trace();
        SessionSnapshot {
            v: SCHEMA_VERSION,
            session_id: self.id,
            scenario_id: self.driver.scenario().id,
            status: self.status(),
            paused: self.started && !self.connected && self.outcome().is_none(),
            connected: self.connected,
            step: self.driver.step_index(),
            mission: self.driver.scenario().task.mission_text.clone(),
            grid_snapshot: GridSnapshot::of(self.driver.env()),
            history: self.driver.history().iter().map(|a| a.index()).collect(),
            pending: self.driver.pending().map(|p| PendingHelp {
                step: p.step,
                prompt_text: p.prompt_text.clone(),
                prediction_set: p.prediction_set.actions.iter().map(|a| a.index()).collect(),
                confidences: p.confidences,
            }),
            outcome: self.outcome(),
            help_count: trace.help_count(),
        }
    }

    fn record_executed(&mut self, source: cofine_core::evaluation::ActionSource) {
        let step = self.driver.step_index().saturating_sub(1);
        if let Some(&a) = self.driver.history().last() {
            self.last_executed = Some(ExecutedAction {
                step,
                action_index: a.index(),
                source,
            });
        }
    }

    /// Runs the model until it needs help or the rollout ends.
    fn pump(&mut self, model: &dyn ConfidenceModel<f64>, events: &mut Vec<ServerEvent>) {
        use cofine_core::evaluation::ActionSource;
        self.started = true;
        loop {
            let before = self.driver.step_index();
            match self.driver.advance(model) {
                Ok(DriverEvent::Executed { .. }) => {
                    self.record_executed(ActionSource::Model);
                    events.push(self.state_update());
                }
                Ok(DriverEvent::HelpNeeded(_)) => {
                    events.extend(self.help_request());
                    return;
                }
                Ok(DriverEvent::Finished(_)) => {
                    if self.driver.step_index() > before {
                        self.record_executed(ActionSource::Model);
                    }
                    events.push(self.state_update());
                    events.extend(self.finished());
                    return;
                }
                Err(e) => {
                    events.push(self.validation(ValidationKind::Finished, format!("model failed: {e}")));
                    self.driver.abort();
                    events.push(self.state_update());
                    events.extend(self.finished());
                    return;
                }
            }
        }
    }

    fn handle(&mut self, model: &dyn ConfidenceModel<f64>, text: &str, events: &mut Vec<ServerEvent>) {
        use cofine_core::evaluation::ActionSource;
        let msg: Envelope<ClientMessage> = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => {
                events.push(self.validation(ValidationKind::BadMessage, e.to_string()));
                return;
            }
        };
        if msg.v != SCHEMA_VERSION {
            events.push(self.validation(
                ValidationKind::BadMessage,
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", msg.v),
            ));
            return;
        }
        let (step, response) = match msg.body {
            ClientMessage::Abort => (self.driver.step_index(), HelpResponse::Abort),
            ClientMessage::ChooseAction { step, action_index } => match Action::from_index(action_index) {
                Some(a) => (step, HelpResponse::Choose(a)),
                None => {
                    events.push(self.validation(ValidationKind::NotInSet, format!("no action with index {action_index}")));
                    return;
                }
            },
        };
        if response == HelpResponse::Abort && self.driver.pending().is_none() {
            if self.outcome().is_some() {
                events.push(self.validation(ValidationKind::Finished, "rollout already finished".into()));
            } else {
                self.driver.abort();
                events.push(self.state_update());
                events.extend(self.finished());
            }
            return;
        }
        match self.driver.resolve(step, response) {
            Ok(Some(DriverEvent::Finished(_))) => {
                if matches!(response, HelpResponse::Choose(_)) {
                    self.record_executed(ActionSource::Helper);
                }
                events.push(self.state_update());
                events.extend(self.finished());
            }
            Ok(_) => {
                self.record_executed(ActionSource::Helper);
                events.push(self.state_update());
                self.pump(model, events);
            }
            Err(e) => {
                let kind = match e {
                    EvalError::NotInSet { .. } => ValidationKind::NotInSet,
                    EvalError::StaleStep { .. } => ValidationKind::StaleStep,
                    EvalError::NothingPending => ValidationKind::NothingPending,
                    EvalError::Finished => ValidationKind::Finished,
                    _ => ValidationKind::BadMessage,
                };
                events.push(self.validation(kind, e.to_string()));
            }
        }
    }
}

pub struct AppState {
    model: SharedModel,
    threshold: Threshold<f64>,
    source: ScenarioSource,
    config: ServeConfig,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: SharedModel, threshold: Threshold<f64>, source: ScenarioSource, config: ServeConfig) -> Arc<Self> {
        Arc::new(AppState {
            model,
            threshold,
            source,
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: u64) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session table").get(&id).cloned()
    }
}

fn error(status: StatusCode, error: &str, message: impl Into<String>) -> Response {
    let body = ErrorBody {
        v: SCHEMA_VERSION,
        error: error.to_string(),
        message: message.into(),
    };
    (status, Json(body)).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/ws", get(connect))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn create_session(State(state): State<Arc<AppState>>, body: Option<Json<StartSession>>) -> Response {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let scenario = match (&state.source, req.index, req.seed) {
        (_, Some(_), Some(_)) => return error(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", "give either index or seed"),
        (ScenarioSource::List(list), Some(i), None) => match list.get(i) {
            Some(s) => s.clone(),
            None => {
                return error(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "bad_request",
                    format!("index {i} out of range (0..{})", list.len()),
                )
            }
        },
        (ScenarioSource::List(list), None, None) => {
            let n = state.next_id.load(Ordering::Relaxed) as usize;
            list[(n - 1) % list.len()].clone()
        }
        (ScenarioSource::Sampled(_), Some(_), None) => {
            return error(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", "this server samples scenarios; give a seed")
        }
        (source, None, seed) => {
            let distribution = match source {
                ScenarioSource::Sampled(d) => *d,
                ScenarioSource::List(l) => l[0].distribution,
            };
            let seed = seed.unwrap_or_else(|| state.next_id.load(Ordering::Relaxed));
            match sample_scenario(seed, distribution) {
                Ok(s) => s,
                Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, "bad_request", e.to_string()),
            }
        }
    };
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let created = SessionCreated {
        v: SCHEMA_VERSION,
        session_id: id,
        scenario_id: scenario.id,
        mission: scenario.task.mission_text.clone(),
    };
    let session = Session {
        id,
        driver: RolloutDriver::new(scenario, state.threshold, state.config.max_steps),
        started: false,
        connected: false,
        generation: 0,
        last_executed: None,
    };
    state
        .sessions
        .lock()
        .expect("session table")
        .insert(id, Arc::new(Mutex::new(session)));
    (StatusCode::CREATED, Json(created)).into_response()
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> Response {
    match state.session(id) {
        Some(s) => Json(s.lock().expect("session").snapshot()).into_response(),
        None => error(StatusCode::NOT_FOUND, "not_found", format!("no session {id}")),
    }
}

async fn connect(State(state): State<Arc<AppState>>, Path(id): Path<u64>, ws: WebSocketUpgrade) -> Response {
    let Some(session) = state.session(id) else {
        return error(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"));
    };
    let generation = {
        let mut s = session.lock().expect("session");
        if s.connected {
            return error(StatusCode::CONFLICT, "already_connected", format!("session {id} already has a client"));
        }
        s.connected = true;
        s.generation += 1;
        s.generation
    };
    ws.on_upgrade(move |socket| run_socket(state, session, generation, socket))
}

async fn send_all(socket: &mut WebSocket, events: Vec<ServerEvent>) -> bool {
    for e in events {
        let text = serde_json::to_string(&Envelope::new(e)).expect("events serialize");
        if socket.send(Message::Text(text.into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn run_socket(state: Arc<AppState>, session: Arc<Mutex<Session>>, generation: u64, mut socket: WebSocket) {
    let greeting = {
        let mut s = session.lock().expect("session");
        let mut events = vec![s.state_update()];
        match s.status() {
            SessionStatus::Idle => s.pump(state.model.as_ref(), &mut events),
            SessionStatus::AwaitingHelp => events.extend(s.help_request()),
            SessionStatus::Finished => events.extend(s.finished()),
            SessionStatus::Running => s.pump(state.model.as_ref(), &mut events),
        }
        events
    };
    let mut open = send_all(&mut socket, greeting).await;
    while open {
        let Some(Ok(msg)) = socket.recv().await else {
            break;
        };
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            Message::Binary(_) => "<binary>".to_string(),
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        let events = {
            let mut s = session.lock().expect("session");
            let mut events = Vec::new();
            s.handle(state.model.as_ref(), &text, &mut events);
            events
        };
        open = send_all(&mut socket, events).await;
    }
    let timeout = state.config.disconnect_timeout;
    {
        let mut s = session.lock().expect("session");
        if s.generation != generation {
            return;
        }
        s.connected = false;
        if s.outcome().is_some() {
            return;
        }
    }
    tokio::spawn(async move {
        tokio::time::sleep(timeout).await;
        let mut s = session.lock().expect("session");
        if !s.connected && s.generation == generation && s.outcome().is_none() {
            s.driver.abort();
        }
    });
}
