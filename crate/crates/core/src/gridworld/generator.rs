use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    plan_from, Cell, Color, Descriptor, Direction, DistributionTag, Environment, GridError,
    Object, PlannerLimits, Pos, Scenario, Task, TaskFamily,
};

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// Scenarios whose oracle plan is longer than this are resampled.
    pub h_max: usize,
    pub max_attempts: usize,
    /// Inclusive object-count range for D.
    pub objects_d: (usize, usize),
    /// Inclusive object-count range for D'.
    pub objects_d_prime: (usize, usize),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            h_max: 40,
            max_attempts: 1000,
            objects_d: (4, 8),
            objects_d_prime: (3, 6),
        }
    }
}

pub fn sample_scenario(seed: u64, distribution: DistributionTag) -> Result<Scenario, GridError> {
    sample_scenario_with(seed, distribution, &GeneratorConfig::default())
}

/// Rejection-samples a solvable scenario with horizon in `1..=h_max`. The
/// same seed always yields the same scenario.
pub fn sample_scenario_with(
    seed: u64,
    distribution: DistributionTag,
    config: &GeneratorConfig,
) -> Result<Scenario, GridError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_attempts {
        let Some((environment, task)) = propose(&mut rng, distribution, config) else {
            continue;
        };
        let limits = PlannerLimits {
            max_depth: config.h_max,
        };
        match plan_from(&environment, &task, limits) {
            Ok(plan) if !plan.is_empty() => {
                return Ok(Scenario {
                    id: seed,
                    seed,
                    distribution,
                    environment,
                    task,
                    horizon: plan.len(),
                });
            }
            _ => continue,
        }
    }
    Err(GridError::Generator {
        attempts: config.max_attempts,
        distribution,
    })
}

fn propose(
    rng: &mut ChaCha8Rng,
    distribution: DistributionTag,
    config: &GeneratorConfig,
) -> Option<(Environment, Task)> {
    let (iw, ih) = distribution.interior();
    let mut free: Vec<Pos> = (1..=ih as i32)
        .flat_map(|y| (1..=iw as i32).map(move |x| Pos::new(x, y)))
        .collect();
    free.shuffle(rng);

    let (lo, hi) = match distribution {
        DistributionTag::D => config.objects_d,
        DistributionTag::DPrime => config.objects_d_prime,
    };
    let n_objects = rng.gen_range(lo..=hi).min(free.len().saturating_sub(1));
    let agent_pos = free.pop()?;
    let agent_dir = Direction::ALL[rng.gen_range(0..4)];
    let mut env = Environment::walled(iw + 2, ih + 2, agent_pos, agent_dir);

    let kinds = distribution.kinds();
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let object = Object::new(
            kinds[rng.gen_range(0..kinds.len())],
            Color::ALL[rng.gen_range(0..Color::ALL.len())],
        );
        let pos = free.pop()?;
        env.set(pos, Cell::Object(object));
        objects.push(object);
    }

    let family = TaskFamily::ALL[rng.gen_range(0..TaskFamily::ALL.len())];
    let pickable: Vec<Descriptor> = objects
        .iter()
        .filter(|o| o.kind.pickable())
        .map(Object::descriptor)
        .collect();
    let any: Vec<Descriptor> = objects.iter().map(Object::descriptor).collect();

    let a = match family {
        TaskFamily::GoTo => *any.choose(rng)?,
        _ => *pickable.choose(rng)?,
    };
    let task = match family {
        TaskFamily::GoTo => Task::go_to(a),
        TaskFamily::PickUp => Task::pick_up(a),
        TaskFamily::PickUpThenGoTo | TaskFamily::PutNext => {
            let others: Vec<Descriptor> = any.iter().copied().filter(|d| *d != a).collect();
            let b = *others.choose(rng)?;
            if family == TaskFamily::PutNext {
                Task::put_next(a, b)
            } else {
                Task::pick_up_then_go_to(a, b)
            }
        }
    };
    Some((env, task))
}
