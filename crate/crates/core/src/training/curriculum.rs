use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoding::{Dataset, StepRecord};
use crate::gridworld::TaskFamily;
use crate::scalar::Scalar;

/// Phase `p` starts at `phase_start_epochs[p]` and introduces `families[p]`;
/// once superseded, family `p` keeps only `retained_per_phase[p]` scenarios.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub phase_start_epochs: Vec<usize>,
    pub retained_per_phase: Vec<usize>,
    pub families: Vec<TaskFamily>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            phase_start_epochs: vec![1, 6, 11, 21],
            retained_per_phase: vec![100, 100, 500, 1000],
            families: TaskFamily::ALL.to_vec(),
        }
    }
}

impl CurriculumSchedule {
    /// Every family active from the first epoch.
    pub fn flat() -> Self {
        CurriculumSchedule {
            phase_start_epochs: vec![1],
            retained_per_phase: vec![usize::MAX],
            families: TaskFamily::ALL.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let n = self.phase_start_epochs.len();
        let bad = |m: &str| Err(TrainError::InvalidConfig(format!("curriculum: {m}")));
        if n == 0 {
            return bad("needs at least one phase");
        }
        if self.retained_per_phase.len() != n {
            return bad("retained_per_phase must have one entry per phase");
        }
        if self.phase_start_epochs[0] != 1 {
            return bad("the first phase must start at epoch 1");
        }
        if self.phase_start_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("phase start epochs must be strictly increasing");
        }
        if self.retained_per_phase.contains(&0) {
            return bad("retained counts must be positive");
        }
        if self.families.len() != n && !(n == 1 && !self.families.is_empty()) {
            return bad("one family per phase (or a single phase with any families)");
        }
        Ok(())
    }

    /// Index of the phase active at `epoch` (1-based).
    pub fn phase(&self, epoch: usize) -> usize {
        self.phase_start_epochs.iter().rposition(|&s| s <= epoch).unwrap_or(0)
    }

    pub fn final_phase_start(&self) -> usize {
        *self.phase_start_epochs.last().unwrap_or(&1)
    }

    /// Families introduced by phase `p`; a single phase introduces them all.
    fn families_of(&self, p: usize) -> &[TaskFamily] {
        if self.phase_start_epochs.len() == 1 {
            &self.families
        } else {
            std::slice::from_ref(&self.families[p])
        }
    }
}

/// A schedule bound to a dataset, with the retained subsets fixed up front.
#[derive(Debug, Clone)]
pub struct Curriculum {
    schedule: CurriculumSchedule,
    /// Entry indices for each phase, in shuffled order.
    by_phase: Vec<Vec<usize>>,
}

impl Curriculum {
    pub fn new<S: Scalar, R: Rng>(dataset: &Dataset<S>, schedule: CurriculumSchedule, rng: &mut R) -> Self {
        let by_phase = (0..schedule.phase_start_epochs.len())
            .map(|p| {
                let fams = schedule.families_of(p);
                let mut idx: Vec<usize> = dataset
                    .entries
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| fams.contains(&e.scenario.task.family))
                    .map(|(i, _)| i)
                    .collect();
                idx.shuffle(rng);
                idx
            })
            .collect();
        Curriculum { schedule, by_phase }
    }

    pub fn schedule(&self) -> &CurriculumSchedule {
        &self.schedule
    }

    /// Indices of the dataset entries active at `epoch`, sorted.
    pub fn active_entries(&self, epoch: usize) -> Vec<usize> {
        let p = self.schedule.phase(epoch);
        let mut out = Vec::new();
        for (q, idx) in self.by_phase.iter().enumerate().take(p + 1) {
            let keep = if q == p {
                idx.len()
            } else {
                self.schedule.retained_per_phase[q].min(idx.len())
            };
            out.extend_from_slice(&idx[..keep]);
        }
        out.sort_unstable();
        out
    }
}

/// The step records active at `epoch`.
pub fn curriculum_filter<'a, S: Scalar>(
    dataset: &'a Dataset<S>,
    epoch: usize,
    curriculum: &Curriculum,
) -> Vec<&'a StepRecord<S>> {
    curriculum
        .active_entries(epoch)
        .into_iter()
        .flat_map(|i| dataset.entries[i].steps.iter())
        .collect()
}
