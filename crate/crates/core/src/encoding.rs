//! Prompt rendering and the fixed-size feature encoding the policy consumes.
//!
//! The prompt text is kept for logging and the help console; the policy only
//! sees [`FeatureVector`]s. Both are pure functions of the environment, the
//! task, the action history and the step index.

use std::fmt::Write as _;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gridworld::{
    oracle_plan, sample_scenario_with, simulate, Action, Cell, Color, DistributionTag,
    Environment, GeneratorConfig, GridError, ObjectKind, Plan, Scenario, ScenarioId, Task,
    TaskFamily, NUM_ACTIONS,
};
use crate::scalar::Scalar;

/// Half-width of the egocentric window.
pub const VIEW_RADIUS: usize = 7;
pub const VIEW_SIDE: usize = 2 * VIEW_RADIUS + 1;
/// Actions remembered in the feature history.
pub const HISTORY_LEN: usize = 4;
/// Step-index normalizer.
pub const STEP_NORM: usize = 40;

const N_KINDS: usize = ObjectKind::ALL.len();
const N_COLORS: usize = Color::ALL.len();
const DESCRIPTOR_LEN: usize = N_KINDS + N_COLORS;
/// wall, kinds, colors, matches target_a, matches target_b
pub const CELL_CHANNELS: usize = 1 + DESCRIPTOR_LEN + 2;
const MATCH_A: usize = 1 + DESCRIPTOR_LEN;
const MATCH_B: usize = MATCH_A + 1;
const WINDOW_LEN: usize = VIEW_SIDE * VIEW_SIDE * CELL_CHANNELS;
const CARRY_OFFSET: usize = WINDOW_LEN;
/// kind, color, present, matches target_a
const CARRY_LEN: usize = DESCRIPTOR_LEN + 2;
const TASK_OFFSET: usize = CARRY_OFFSET + CARRY_LEN;
const TASK_LEN: usize = TaskFamily::ALL.len() + 2 * DESCRIPTOR_LEN;
const HISTORY_OFFSET: usize = TASK_OFFSET + TASK_LEN;
const STEP_OFFSET: usize = HISTORY_OFFSET + HISTORY_LEN * NUM_ACTIONS;

/// Feature dimension.
pub const FEATURE_DIM: usize = STEP_OFFSET + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub step_index: usize,
    pub history: Vec<Action>,
}

fn steps(n: i32, dir: &str) -> String {
    if n == 1 {
        format!("1 step {dir}")
    } else {
        format!("{n} steps {dir}")
    }
}

/// Egocentric (forward, right) offset of `(x, y)` from the agent.
fn egocentric(env: &Environment, x: i32, y: i32) -> (i32, i32) {
    let (dx, dy) = (x - env.agent_pos.x, y - env.agent_pos.y);
    let (fx, fy) = env.agent_dir.delta();
    let (rx, ry) = env.agent_dir.right().delta();
    (dx * fx + dy * fy, dx * rx + dy * ry)
}

fn cell_phrase(cell: &Cell) -> Option<String> {
    match cell {
        Cell::Empty => None,
        Cell::Wall => Some("wall".to_string()),
        Cell::Object(o) => Some(o.descriptor().to_string()),
    }
}

/// "You see ..." sentences, left to right and back to front.
pub fn describe_observation(env: &Environment) -> String {
    let mut seen = Vec::new();
    for y in 0..env.height as i32 {
        for x in 0..env.width as i32 {
            if (x, y) == (env.agent_pos.x, env.agent_pos.y) {
                continue;
            }
            let cell = &env.cells[y as usize * env.width + x as usize];
            if let Some(what) = cell_phrase(cell) {
                let (f, r) = egocentric(env, x, y);
                seen.push((r, f, what));
            }
        }
    }
    seen.sort_by_key(|(r, f, _)| (*r, *f));
    let mut sentences: Vec<String> = seen
        .into_iter()
        .map(|(r, f, what)| {
            let longitudinal = match f {
                0 => None,
                f if f > 0 => Some(steps(f, "forward")),
                f => Some(steps(-f, "back")),
            };
            let lateral = match r {
                0 => None,
                r if r > 0 => Some(steps(r, "right")),
                r => Some(steps(-r, "left")),
            };
            let place = match (longitudinal, lateral) {
                (Some(a), Some(b)) => format!("{a} and {b}"),
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("agent cell skipped"),
            };
            format!("You see a {what} {place}.")
        })
        .collect();
    if let Some(held) = env.carrying {
        sentences.push(format!("You carry a {}.", held.descriptor()));
    }
    sentences.join(" ")
}

/// Prompt for an explicit state.
pub fn render_prompt_for_state(env: &Environment, task: &Task, history: &[Action], t: usize) -> Prompt {
    let mut text = String::from("Select an action by its corresponding number:\n");
    for a in Action::ALL {
        let _ = writeln!(text, "{}: {}", a.index(), a.name());
    }
    let _ = write!(
        text,
        "\nGoal of the agent: {}\n\nObservation: {}\n\nPrevious Steps: ",
        task.mission_text,
        describe_observation(env)
    );
    let names: Vec<&str> = history.iter().map(|a| a.name()).collect();
    text.push_str(&names.join(", "));
    text.push_str("\n\nYour next action (choose number):\nAction:");
    Prompt {
        text,
        step_index: t,
        history: history.to_vec(),
    }
}

/// Prompt at step `t` after replaying `history` from the scenario start.
pub fn render_prompt(scenario: &Scenario, t: usize, history: &[Action]) -> Prompt {
    debug_assert_eq!(history.len(), t);
    let env = simulate(&scenario.environment, history);
    render_prompt_for_state(&env, &scenario.task, history, t)
}

/// Fixed-length feature vector, stored sparsely because almost every entry
/// is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct FeatureVector<S> {
    /// Strictly increasing indices of the non-zero entries.
    pub indices: Vec<u32>,
    pub values: Vec<S>,
}

impl<S: Scalar> FeatureVector<S> {
    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn nonzeros(&self) -> impl Iterator<Item = (usize, S)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn get(&self, i: usize) -> S {
        match self.indices.binary_search(&(i as u32)) {
            Ok(k) => self.values[k],
            Err(_) => S::zero(),
        }
    }

    pub fn to_dense(&self) -> Vec<S> {
        let mut out = vec![S::zero(); FEATURE_DIM];
        for (i, v) in self.nonzeros() {
            out[i] = v;
        }
        out
    }

    pub fn from_dense(dense: &[S]) -> Self {
        let mut fv = FeatureVector {
            indices: vec![],
            values: vec![],
        };
        for (i, &v) in dense.iter().enumerate() {
            if v != S::zero() {
                fv.indices.push(i as u32);
                fv.values.push(v);
            }
        }
        fv
    }

    pub fn cast<T: Scalar>(&self) -> FeatureVector<T> {
        FeatureVector {
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

fn descriptor_slots(kind: ObjectKind, color: Color) -> [usize; 2] {
    [kind.index(), N_KINDS + color.index()]
}

pub fn encode_features<S: Scalar>(
    env: &Environment,
    task: &Task,
    history: &[Action],
    t: usize,
) -> FeatureVector<S> {
    let mut on: Vec<usize> = Vec::with_capacity(96);
    let r = VIEW_RADIUS as i32;
    let (fx, fy) = env.agent_dir.delta();
    let (rx, ry) = env.agent_dir.right().delta();
    for row in 0..VIEW_SIDE as i32 {
        let f = r - row;
        for col in 0..VIEW_SIDE as i32 {
            let side = col - r;
            let p = crate::gridworld::Pos::new(
                env.agent_pos.x + f * fx + side * rx,
                env.agent_pos.y + f * fy + side * ry,
            );
            let base = (row as usize * VIEW_SIDE + col as usize) * CELL_CHANNELS;
            match env.cell(p) {
                Some(Cell::Wall) => on.push(base),
                Some(Cell::Object(o)) => {
                    for s in descriptor_slots(o.kind, o.color) {
                        on.push(base + 1 + s);
                    }
                    if task.target_a.matches(o) {
                        on.push(base + MATCH_A);
                    }
                    if task.target_b.is_some_and(|b| b.matches(o)) {
                        on.push(base + MATCH_B);
                    }
                }
                _ => {}
            }
        }
    }
    if let Some(held) = env.carrying {
        for s in descriptor_slots(held.kind, held.color) {
            on.push(CARRY_OFFSET + s);
        }
        on.push(CARRY_OFFSET + DESCRIPTOR_LEN);
        if task.target_a.matches(&held) {
            on.push(CARRY_OFFSET + DESCRIPTOR_LEN + 1);
        }
    }
    on.push(TASK_OFFSET + task.family.index());
    let targets = TASK_OFFSET + TaskFamily::ALL.len();
    for s in descriptor_slots(task.target_a.kind, task.target_a.color) {
        on.push(targets + s);
    }
    if let Some(b) = task.target_b {
        for s in descriptor_slots(b.kind, b.color) {
            on.push(targets + DESCRIPTOR_LEN + s);
        }
    }
    for (slot, a) in history.iter().rev().take(HISTORY_LEN).enumerate() {
        on.push(HISTORY_OFFSET + slot * NUM_ACTIONS + a.index());
    }
    on.sort_unstable();

    let mut fv = FeatureVector {
        indices: on.iter().map(|&i| i as u32).collect(),
        values: vec![S::one(); on.len()],
    };
    let step = (t as f64 / STEP_NORM as f64).min(1.0);
    if step > 0.0 {
        fv.indices.push(STEP_OFFSET as u32);
        fv.values.push(S::lit(step));
    }
    fv
}

/// Features at step `t` after replaying `history` from the scenario start.
pub fn encode_scenario_features<S: Scalar>(
    scenario: &Scenario,
    t: usize,
    history: &[Action],
) -> FeatureVector<S> {
    let env = simulate(&scenario.environment, history);
    encode_features(&env, &scenario.task, history, t)
}

/// One teacher-forced (prompt, correct action) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct StepRecord<S> {
    pub scenario_id: ScenarioId,
    pub t: usize,
    pub prompt: Prompt,
    pub features: FeatureVector<S>,
    pub correct_action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct DatasetEntry<S> {
    pub scenario: Scenario,
    pub plan: Plan,
    pub steps: Vec<StepRecord<S>>,
}

impl<S: Scalar> DatasetEntry<S> {
    /// Teacher-forced records along the ground-truth plan.
    pub fn from_scenario(scenario: Scenario, plan: Plan) -> Self {
        let mut steps = Vec::with_capacity(plan.len());
        let mut env = scenario.environment.clone();
        for (t, &a) in plan.actions.iter().enumerate() {
            let history = &plan.actions[..t];
            steps.push(StepRecord {
                scenario_id: scenario.id,
                t,
                prompt: render_prompt_for_state(&env, &scenario.task, history, t),
                features: encode_features(&env, &scenario.task, history, t),
                correct_action: a,
            });
            env.apply(a);
        }
        DatasetEntry {
            scenario,
            plan,
            steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Dataset<S> {
    pub distribution: DistributionTag,
    pub seed: u64,
    pub entries: Vec<DatasetEntry<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn n_steps(&self) -> usize {
        self.entries.iter().map(|e| e.steps.len()).sum()
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord<S>> + '_ {
        self.entries.iter().flat_map(|e| e.steps.iter())
    }

    pub fn scenarios(&self) -> impl Iterator<Item = &Scenario> + '_ {
        self.entries.iter().map(|e| &e.scenario)
    }
}

/// Dataset role; each draws scenario seeds from its own stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calibration,
    Validation,
    Ood,
}

/// Seed of the stream a split draws scenario seeds from.
pub fn split_seed(master: u64, split: Split) -> u64 {
    let tag: u64 = match split {
        Split::Train => 0x7472_6169_6e00_0001,
        Split::Calibration => 0x6361_6c69_6200_0002,
        Split::Validation => 0x7661_6c69_6400_0003,
        Split::Ood => 0x6f6f_6400_0000_0004,
    };
    splitmix64(master ^ tag)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn build_dataset<S: Scalar>(
    n_scenarios: usize,
    distribution: DistributionTag,
    rng_seed: u64,
) -> Result<Dataset<S>, GridError> {
    build_dataset_with(n_scenarios, distribution, rng_seed, &GeneratorConfig::default())
}

pub fn build_dataset_with<S: Scalar>(
    n_scenarios: usize,
    distribution: DistributionTag,
    rng_seed: u64,
    config: &GeneratorConfig,
) -> Result<Dataset<S>, GridError> {
    assert!(n_scenarios > 0, "dataset needs at least one scenario");
    let mut stream = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut entries = Vec::with_capacity(n_scenarios);
    for _ in 0..n_scenarios {
        let scenario = sample_scenario_with(stream.next_u64(), distribution, config)?;
        let plan = oracle_plan(&scenario)?;
        entries.push(DatasetEntry::from_scenario(scenario, plan));
    }
    Ok(Dataset {
        distribution,
        seed: rng_seed,
        entries,
    })
}
