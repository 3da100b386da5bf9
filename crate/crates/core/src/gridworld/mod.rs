//! Procedural BabyAI-style grid worlds: objects, dynamics, mission goals, a
//! scenario generator and a breadth-first oracle planner.

mod generator;
mod planner;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generator::{sample_scenario, sample_scenario_with, GeneratorConfig};
pub use planner::{admissible, oracle_plan, plan_from, PlannerLimits};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("scenario generator gave up after {attempts} attempts ({distribution})")]
    Generator {
        attempts: usize,
        distribution: DistributionTag,
    },
    #[error("no plan within {max_depth} steps for mission `{mission}`")]
    Unsolvable { max_depth: usize, mission: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistributionTag {
    /// In-distribution: 8x8 rooms with keys, balls, boxes and doors.
    #[serde(rename = "D")]
    D,
    /// Shifted: 5x7 rooms with traffic cones, fire hydrants and cars.
    #[serde(rename = "D_prime")]
    DPrime,
}

impl DistributionTag {
    pub fn kinds(self) -> &'static [ObjectKind] {
        match self {
            DistributionTag::D => &[
                ObjectKind::Key,
                ObjectKind::Ball,
                ObjectKind::Box,
                ObjectKind::Door,
            ],
            DistributionTag::DPrime => &[ObjectKind::Cone, ObjectKind::Hydrant, ObjectKind::Car],
        }
    }

    /// Navigable interior as (width, height).
    pub fn interior(self) -> (usize, usize) {
        match self {
            DistributionTag::D => (6, 6),
            DistributionTag::DPrime => (5, 3),
        }
    }
}

impl fmt::Display for DistributionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionTag::D => "D",
            DistributionTag::DPrime => "D_prime",
        })
    }
}

impl std::str::FromStr for DistributionTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "D" | "d" => Ok(DistributionTag::D),
            "D_prime" | "d_prime" | "D'" => Ok(DistributionTag::DPrime),
            other => Err(format!("unknown distribution `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Key,
    Ball,
    Box,
    Door,
    Cone,
    Hydrant,
    Car,
}

impl ObjectKind {
    pub const ALL: [ObjectKind; 7] = [
        ObjectKind::Key,
        ObjectKind::Ball,
        ObjectKind::Box,
        ObjectKind::Door,
        ObjectKind::Cone,
        ObjectKind::Hydrant,
        ObjectKind::Car,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Word used in prompts and mission text.
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Key => "key",
            ObjectKind::Ball => "ball",
            ObjectKind::Box => "box",
            ObjectKind::Door => "door",
            ObjectKind::Cone => "traffic cone",
            ObjectKind::Hydrant => "fire hydrant",
            ObjectKind::Car => "car",
        }
    }

    /// Doors cannot be carried.
    pub fn pickable(self) -> bool {
        !matches!(self, ObjectKind::Door)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Grey,
    Purple,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Grey,
        Color::Purple,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Grey => "grey",
            Color::Purple => "purple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub kind: ObjectKind,
    pub color: Color,
    /// Door state; ignored for every other kind.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub open: bool,
}

impl Object {
    pub fn new(kind: ObjectKind, color: Color) -> Self {
        Object {
            kind,
            color,
            open: false,
        }
    }

    pub fn descriptor(&self) -> Descriptor {
        Descriptor {
            kind: self.kind,
            color: self.color,
        }
    }
}

/// A (kind, color) reference to objects, as used in mission text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: ObjectKind,
    pub color: Color,
}

impl Descriptor {
    pub fn new(kind: ObjectKind, color: Color) -> Self {
        Descriptor { kind, color }
    }

    pub fn matches(&self, object: &Object) -> bool {
        object.kind == self.kind && object.color == self.color
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.kind.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Empty,
    Wall,
    Object(Object),
}

impl Cell {
    pub fn object(&self) -> Option<&Object> {
        match self {
            Cell::Object(o) => Some(o),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    North,
    East,
    South,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::North,
        Direction::East,
        Direction::South,
        Direction::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Direction {
        Direction::ALL[i % 4]
    }

    pub fn left(self) -> Direction {
        Direction::from_index(self.index() + 3)
    }

    pub fn right(self) -> Direction {
        Direction::from_index(self.index() + 1)
    }

    /// Unit step in grid coordinates; y grows southwards.
    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::North => (0, -1),
            Direction::East => (1, 0),
            Direction::South => (0, 1),
            Direction::West => (-1, 0),
        }
    }
}

/// One of the six primitive actions. Serialized as its menu index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    TurnLeft = 0,
    TurnRight = 1,
    Forward = 2,
    PickUp = 3,
    Drop = 4,
    Toggle = 5,
}

pub const NUM_ACTIONS: usize = 6;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Forward,
        Action::PickUp,
        Action::Drop,
        Action::Toggle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// Menu label, exactly as printed in the prompt header.
    pub fn name(self) -> &'static str {
        match self {
            Action::TurnLeft => "turn left",
            Action::TurnRight => "turn right",
            Action::Forward => "go forward",
            Action::PickUp => "pick up object",
            Action::Drop => "drop object",
            Action::Toggle => "toggle",
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a as u8
    }
}

impl TryFrom<u8> for Action {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Action::from_index(v as usize).ok_or_else(|| format!("action index {v} out of range 0..6"))
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
}

impl Pos {
    pub fn new(x: i32, y: i32) -> Self {
        Pos { x, y }
    }

    pub fn offset(self, (dx, dy): (i32, i32)) -> Pos {
        Pos::new(self.x + dx, self.y + dy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Environment {
    pub width: usize,
    pub height: usize,
    /// Row-major, `cells[y * width + x]`.
    pub cells: Vec<Cell>,
    pub agent_pos: Pos,
    pub agent_dir: Direction,
    pub carrying: Option<Object>,
}

impl Environment {
    /// Empty room of the given total size with a one-cell wall ring.
    pub fn walled(width: usize, height: usize, agent_pos: Pos, agent_dir: Direction) -> Self {
        let mut cells = vec![Cell::Empty; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                    cells[y * width + x] = Cell::Wall;
                }
            }
        }
        Environment {
            width,
            height,
            cells,
            agent_pos,
            agent_dir,
            carrying: None,
        }
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height
    }

    pub fn cell(&self, p: Pos) -> Option<&Cell> {
        if self.in_bounds(p) {
            Some(&self.cells[p.y as usize * self.width + p.x as usize])
        } else {
            None
        }
    }

    pub fn set(&mut self, p: Pos, cell: Cell) {
        assert!(self.in_bounds(p), "cell {p:?} out of bounds");
        let w = self.width;
        self.cells[p.y as usize * w + p.x as usize] = cell;
    }

    pub fn place(&mut self, p: Pos, object: Object) {
        self.set(p, Cell::Object(object));
    }

    pub fn front_pos(&self) -> Pos {
        self.agent_pos.offset(self.agent_dir.delta())
    }

    pub fn front_cell(&self) -> Option<&Cell> {
        self.cell(self.front_pos())
    }

    pub fn front_object(&self) -> Option<&Object> {
        self.front_cell().and_then(Cell::object)
    }

    pub fn objects(&self) -> impl Iterator<Item = (Pos, &Object)> + '_ {
        self.cells.iter().enumerate().filter_map(move |(i, c)| {
            c.object().map(|o| {
                (
                    Pos::new((i % self.width) as i32, (i / self.width) as i32),
                    o,
                )
            })
        })
    }

    /// Applies one action in place. Blocked or inapplicable actions are no-ops.
    pub fn apply(&mut self, action: Action) {
        match action {
            Action::TurnLeft => self.agent_dir = self.agent_dir.left(),
            Action::TurnRight => self.agent_dir = self.agent_dir.right(),
            Action::Forward => {
                let front = self.front_pos();
                if let Some(Cell::Empty) = self.cell(front) {
                    self.agent_pos = front;
                }
            }
            Action::PickUp => {
                if self.carrying.is_none() {
                    let front = self.front_pos();
                    if let Some(Cell::Object(o)) = self.cell(front).copied() {
                        if o.kind.pickable() {
                            self.carrying = Some(o);
                            self.set(front, Cell::Empty);
                        }
                    }
                }
            }
            Action::Drop => {
                let front = self.front_pos();
                if let (Some(o), Some(Cell::Empty)) = (self.carrying, self.cell(front)) {
                    self.place(front, o);
                    self.carrying = None;
                }
            }
            Action::Toggle => {
                let front = self.front_pos();
                if let Some(Cell::Object(o)) = self.cell(front).copied() {
                    if o.kind == ObjectKind::Door {
                        self.place(front, Object { open: !o.open, ..o });
                    }
                }
            }
        }
    }

    /// The same room rotated a quarter turn clockwise, agent included.
    pub fn rotated_clockwise(&self) -> Environment {
        let (w, h) = (self.width, self.height);
        let mut cells = vec![Cell::Empty; w * h];
        // (x, y) -> (h - 1 - y, x) in a room of width h and height w.
        for y in 0..h {
            for x in 0..w {
                let nx = h - 1 - y;
                let ny = x;
                cells[ny * h + nx] = self.cells[y * w + x];
            }
        }
        Environment {
            width: h,
            height: w,
            cells,
            agent_pos: Pos::new(h as i32 - 1 - self.agent_pos.y, self.agent_pos.x),
            agent_dir: self.agent_dir.right(),
            carrying: self.carrying,
        }
    }
}

/// Pure transition function.
pub fn step(env: &Environment, action: Action) -> Environment {
    let mut next = env.clone();
    next.apply(action);
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    GoTo,
    PickUp,
    PickUpThenGoTo,
    PutNext,
}

impl TaskFamily {
    /// Curriculum order, simplest first.
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::GoTo,
        TaskFamily::PickUp,
        TaskFamily::PickUpThenGoTo,
        TaskFamily::PutNext,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn has_second_target(self) -> bool {
        matches!(self, TaskFamily::PickUpThenGoTo | TaskFamily::PutNext)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub family: TaskFamily,
    pub target_a: Descriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_b: Option<Descriptor>,
    pub mission_text: String,
}

impl Task {
    fn build(family: TaskFamily, a: Descriptor, b: Option<Descriptor>) -> Task {
        let mission_text = match (family, b) {
            (TaskFamily::GoTo, _) => format!("go to the {a}"),
            (TaskFamily::PickUp, _) => format!("pick up the {a}"),
            (TaskFamily::PickUpThenGoTo, Some(b)) => {
                format!("go to a {b} after you pick up the {a}")
            }
            (TaskFamily::PutNext, Some(b)) => format!("put the {a} next to the {b}"),
            (f, None) => panic!("{f:?} needs a second target"),
        };
        Task {
            family,
            target_a: a,
            target_b: b,
            mission_text,
        }
    }

    pub fn go_to(a: Descriptor) -> Task {
        Task::build(TaskFamily::GoTo, a, None)
    }

    pub fn pick_up(a: Descriptor) -> Task {
        Task::build(TaskFamily::PickUp, a, None)
    }

    pub fn pick_up_then_go_to(a: Descriptor, b: Descriptor) -> Task {
        Task::build(TaskFamily::PickUpThenGoTo, a, Some(b))
    }

    pub fn put_next(a: Descriptor, b: Descriptor) -> Task {
        Task::build(TaskFamily::PutNext, a, Some(b))
    }
}

fn facing_matches(env: &Environment, d: &Descriptor) -> bool {
    env.front_object().is_some_and(|o| d.matches(o))
}

fn carrying_matches(env: &Environment, d: &Descriptor) -> bool {
    env.carrying.as_ref().is_some_and(|o| d.matches(o))
}

pub fn goal_satisfied(env: &Environment, task: &Task) -> bool {
    let a = &task.target_a;
    match task.family {
        TaskFamily::GoTo => facing_matches(env, a),
        TaskFamily::PickUp => carrying_matches(env, a),
        TaskFamily::PickUpThenGoTo => {
            let b = task.target_b.as_ref().expect("PickUpThenGoTo has target_b");
            carrying_matches(env, a) && facing_matches(env, b)
        }
        TaskFamily::PutNext => {
            let b = task.target_b.as_ref().expect("PutNext has target_b");
            if carrying_matches(env, a) {
                return false;
            }
            env.objects().filter(|(_, o)| a.matches(o)).any(|(p, _)| {
                Direction::ALL.iter().any(|d| {
                    env.cell(p.offset(d.delta()))
                        .and_then(Cell::object)
                        .is_some_and(|o| b.matches(o))
                })
            })
        }
    }
}

pub type ScenarioId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub seed: u64,
    pub distribution: DistributionTag,
    pub environment: Environment,
    pub task: Task,
    pub horizon: usize,
}

/// Ground-truth action sequence for a scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Plan {
    pub actions: Vec<Action>,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// States visited before each action, i.e. `states[t]` is the state in
    /// which `actions[t]` is taken.
    pub fn states(&self, start: &Environment) -> Vec<Environment> {
        let mut out = Vec::with_capacity(self.actions.len());
        let mut env = start.clone();
        for &a in &self.actions {
            out.push(env.clone());
            env.apply(a);
        }
        out
    }
}

pub fn simulate(start: &Environment, actions: &[Action]) -> Environment {
    let mut env = start.clone();
    for &a in actions {
        env.apply(a);
    }
    env
}
