//! Brute-force reference implementations the library is checked against.

use cofine_core::conformal::NonconformityScore;
use cofine_core::gridworld::{
    admissible, goal_satisfied, Action, Color, Descriptor, Direction, Environment, Object, ObjectKind, Pos, Task,
};

pub fn scores(values: &[f64]) -> Vec<NonconformityScore<f64>> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| NonconformityScore::from_value(v, i as u64))
        .collect()
}

/// Smallest score v with at least k scores <= v; no sorting involved.
pub fn brute_quantile(values: &[f64], alpha: f64) -> f64 {
    let d = values.len();
    let k = ((d as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
    if k > d {
        return 1.0;
    }
    values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&u| u <= v).count() >= k)
        .fold(f64::INFINITY, f64::min)
}

/// The unique subset whose members all clear delta and whose non-members
/// all fall below it, found by enumerating all 64 subsets.
pub fn brute_set(p: &[f64; 6], delta: f64) -> Vec<Action> {
    (0u32..64)
        .find(|mask| {
            (0..6).all(|k| {
                let inside = mask & (1 << k) != 0;
                inside == (p[k] >= delta)
            })
        })
        .map(|mask| (0..6).filter(|k| mask & (1 << k) != 0).map(|k| Action::ALL[k]).collect())
        .unwrap()
}

/// Iterative deepening over raw action sequences with no state
/// deduplication; only the admissibility mask is shared with the planner.
pub fn exhaustive_shortest(env: &Environment, task: &Task, max_depth: usize) -> Option<usize> {
    fn dfs(env: &Environment, task: &Task, budget: usize) -> bool {
        if goal_satisfied(env, task) {
            return true;
        }
        if budget == 0 {
            return false;
        }
        Action::ALL.iter().any(|&a| {
            admissible(env, task, a) && {
                let mut next = env.clone();
                next.apply(a);
                dfs(&next, task, budget - 1)
            }
        })
    }
    (0..=max_depth).find(|&d| dfs(env, task, d))
}

fn ball(c: Color) -> Object {
    Object::new(ObjectKind::Ball, c)
}

/// Hand-built rooms of at most 5x5 total cells.
pub fn small_suite() -> Vec<(Environment, Task)> {
    let red_ball = Descriptor::new(ObjectKind::Ball, Color::Red);
    let blue_key = Descriptor::new(ObjectKind::Key, Color::Blue);
    let grey_box = Descriptor::new(ObjectKind::Box, Color::Grey);
    let door = Descriptor::new(ObjectKind::Door, Color::Yellow);
    let mut out = Vec::new();

    let mut e = Environment::walled(5, 5, Pos::new(1, 1), Direction::East);
    e.place(Pos::new(3, 3), ball(Color::Red));
    out.push((e.clone(), Task::go_to(red_ball)));
    out.push((e.clone(), Task::pick_up(red_ball)));

    let mut e2 = e.clone();
    e2.place(Pos::new(3, 1), Object::new(ObjectKind::Key, Color::Blue));
    out.push((e2.clone(), Task::pick_up_then_go_to(red_ball, blue_key)));
    out.push((e2.clone(), Task::put_next(blue_key, red_ball)));
    out.push((e2.clone(), Task::pick_up_then_go_to(blue_key, red_ball)));

    let mut e3 = Environment::walled(5, 5, Pos::new(2, 3), Direction::West);
    e3.place(Pos::new(2, 2), Object::new(ObjectKind::Box, Color::Grey));
    e3.place(Pos::new(1, 1), Object::new(ObjectKind::Door, Color::Yellow));
    e3.place(Pos::new(3, 1), ball(Color::Red));
    out.push((e3.clone(), Task::go_to(door)));
    out.push((e3.clone(), Task::put_next(grey_box, door)));
    out.push((e3.clone(), Task::put_next(red_ball, grey_box)));
    out.push((e3.clone(), Task::pick_up_then_go_to(grey_box, door)));

    // corridor room: 5 wide, 4 tall
    let mut e4 = Environment::walled(5, 4, Pos::new(1, 1), Direction::South);
    e4.place(Pos::new(3, 2), Object::new(ObjectKind::Key, Color::Blue));
    e4.place(Pos::new(3, 1), ball(Color::Red));
    out.push((e4.clone(), Task::put_next(red_ball, blue_key)));
    out.push((e4.clone(), Task::go_to(blue_key)));

    // agent starts holding an unrelated object
    let mut e5 = e.clone();
    e5.carrying = Some(Object::new(ObjectKind::Box, Color::Grey));
    out.push((e5.clone(), Task::pick_up(red_ball)));
    out
}
