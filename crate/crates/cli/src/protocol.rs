//! Message schema of the interactive session service. Every message carries
//! the schema version in `v`.

use cofine_core::evaluation::{ActionSource, Outcome};
use cofine_core::gridworld::{Cell, Environment, Object, ScenarioId, NUM_ACTIONS};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// A message body together with the schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Envelope<T> {
    pub fn new(body: T) -> Self {
        Envelope {
            v: SCHEMA_VERSION,
            body,
        }
    }
}

/// Cell code `[kind, color, state]`: kind 0 is empty, 1 is wall, and
/// `2 + ObjectKind::index()` is an object; state 1 marks an open door.
pub type CellCode = [u8; 3];

fn object_code(o: &Object) -> CellCode {
    [2 + o.kind.index() as u8, o.color.index() as u8, o.open as u8]
}

fn cell_code(c: &Cell) -> CellCode {
    match c {
        Cell::Empty => [0, 0, 0],
        Cell::Wall => [1, 0, 0],
        Cell::Object(o) => object_code(o),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: i32,
    pub y: i32,
    /// 0 north, 1 east, 2 south, 3 west.
    pub dir: u8,
}

/// Row-major grid contents; rendering is left to the client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<CellCode>,
    pub agent: AgentPose,
    pub carrying: Option<CellCode>,
}

impl GridSnapshot {
    pub fn of(env: &Environment) -> Self {
        GridSnapshot {
            width: env.width,
            height: env.height,
            cells: env.cells.iter().map(cell_code).collect(),
            agent: AgentPose {
                x: env.agent_pos.x,
                y: env.agent_pos.y,
                dir: env.agent_dir.index() as u8,
            },
            carrying: env.carrying.as_ref().map(object_code),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AwaitingHelp,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedAction {
    pub step: usize,
    pub action_index: usize,
    pub source: ActionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    NotInSet,
    StaleStep,
    NothingPending,
    Finished,
    BadMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerEvent {
    StateUpdate {
        session_id: u64,
        status: SessionStatus,
        step: usize,
        mission: String,
        grid_snapshot: GridSnapshot,
        /// Executed action indices in order.
        history: Vec<usize>,
        last_executed: Option<ExecutedAction>,
    },
    HelpRequest {
        session_id: u64,
        step: usize,
        prompt_text: String,
        grid_snapshot: GridSnapshot,
        /// Action indices in the set, ascending.
        prediction_set: Vec<usize>,
        confidences: [f64; NUM_ACTIONS],
        delta: f64,
    },
    Finished {
        session_id: u64,
        outcome: Outcome,
        steps_taken: usize,
        help_count: usize,
    },
    Validation {
        session_id: u64,
        error: ValidationKind,
        message: String,
        pending_step: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    ChooseAction { step: usize, action_index: usize },
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingHelp {
    pub step: usize,
    pub prompt_text: String,
    pub prediction_set: Vec<usize>,
    pub confidences: [f64; NUM_ACTIONS],
}

/// Body of `GET /sessions/{id}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub v: u32,
    pub session_id: u64,
    pub scenario_id: ScenarioId,
    pub status: SessionStatus,
    /// The client disconnected and the session waits for it to return.
    pub paused: bool,
    pub connected: bool,
    pub step: usize,
    pub mission: String,
    pub grid_snapshot: GridSnapshot,
    pub history: Vec<usize>,
    pub pending: Option<PendingHelp>,
    pub outcome: Option<Outcome>,
    pub help_count: usize,
}

/// Body of `POST /sessions`. Either pick a scenario from the server's list
/// by `index` or sample one from `seed`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartSession {
    pub index: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub v: u32,
    pub session_id: u64,
    pub scenario_id: ScenarioId,
    pub mission: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub v: u32,
    pub error: String,
    pub message: String,
}
