//! Breadth-first oracle planner.
//!
//! Object manipulation is restricted to what the mission family needs:
//! only objects matching `target_a` may be picked up, and only PutNext (or an
//! agent holding something irrelevant) may drop. Toggling never changes
//! reachability or goals, so it is never planned. Successors are generated in
//! action-index order, which makes the returned plan the lexicographically
//! smallest shortest plan and gives every state a unique correct action.

use std::collections::{HashSet, VecDeque};

use super::{goal_satisfied, Action, Environment, GridError, Plan, Scenario, Task, TaskFamily};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannerLimits {
    pub max_depth: usize,
}

impl Default for PlannerLimits {
    fn default() -> Self {
        PlannerLimits { max_depth: 40 }
    }
}

/// Whether the planner may use `action` in `env` for this mission.
pub fn admissible(env: &Environment, task: &Task, action: Action) -> bool {
    match action {
        Action::TurnLeft | Action::TurnRight | Action::Forward => true,
        Action::PickUp => {
            task.family != TaskFamily::GoTo
                && env.carrying.is_none()
                && env
                    .front_object()
                    .is_some_and(|o| o.kind.pickable() && task.target_a.matches(o))
        }
        Action::Drop => match env.carrying {
            Some(held) => {
                (task.family == TaskFamily::PutNext || !task.target_a.matches(&held))
                    && matches!(env.front_cell(), Some(super::Cell::Empty))
            }
            None => false,
        },
        Action::Toggle => false,
    }
}

/// Shortest plan from an arbitrary state. An already-satisfied goal yields
/// the empty plan.
pub fn plan_from(env: &Environment, task: &Task, limits: PlannerLimits) -> Result<Plan, GridError> {
    if goal_satisfied(env, task) {
        return Ok(Plan { actions: vec![] });
    }
    // (state, parent index, action taken from parent, depth)
    let mut nodes: Vec<(Environment, usize, Action, usize)> = vec![(env.clone(), 0, Action::TurnLeft, 0)];
    let mut seen: HashSet<Environment> = HashSet::new();
    seen.insert(env.clone());
    let mut frontier = VecDeque::from([0usize]);

    while let Some(idx) = frontier.pop_front() {
        let depth = nodes[idx].3;
        if depth >= limits.max_depth {
            continue;
        }
        for action in Action::ALL {
            if !admissible(&nodes[idx].0, task, action) {
                continue;
            }
            let mut next = nodes[idx].0.clone();
            next.apply(action);
            if seen.contains(&next) {
                continue;
            }
            let done = goal_satisfied(&next, task);
            seen.insert(next.clone());
            nodes.push((next, idx, action, depth + 1));
            let child = nodes.len() - 1;
            if done {
                return Ok(Plan {
                    actions: backtrack(&nodes, child),
                });
            }
            frontier.push_back(child);
        }
    }
    Err(GridError::Unsolvable {
        max_depth: limits.max_depth,
        mission: task.mission_text.clone(),
    })
}

fn backtrack(nodes: &[(Environment, usize, Action, usize)], mut idx: usize) -> Vec<Action> {
    let mut actions = Vec::with_capacity(nodes[idx].3);
    while idx != 0 {
        actions.push(nodes[idx].2);
        idx = nodes[idx].1;
    }
    actions.reverse();
    actions
}

/// Ground-truth plan for a scenario from its initial state.
pub fn oracle_plan(scenario: &Scenario) -> Result<Plan, GridError> {
    plan_from(
        &scenario.environment,
        &scenario.task,
        PlannerLimits {
            max_depth: scenario.horizon.max(PlannerLimits::default().max_depth),
        },
    )
}
