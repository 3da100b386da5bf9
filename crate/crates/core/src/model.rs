//! Anything that assigns confidences to the six actions at a decision step.

use std::sync::Arc;

use crate::encoding::FeatureVector;
use crate::gridworld::{plan_from, Action, Environment, PlannerLimits, Task, NUM_ACTIONS};
use crate::policy::{ConfidenceVector, Mlp, PolicyError};
use crate::scalar::Scalar;

/// Everything known at one decision step.
#[derive(Debug, Clone, Copy)]
pub struct StepQuery<'a, S> {
    pub env: &'a Environment,
    pub task: &'a Task,
    pub history: &'a [Action],
    pub t: usize,
    pub features: &'a FeatureVector<S>,
}

pub trait ConfidenceModel<S: Scalar> {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError>;
}

impl<S: Scalar> ConfidenceModel<S> for Mlp<S> {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        self.forward(query.features)
    }
}

impl<S: Scalar, M: ConfidenceModel<S> + ?Sized> ConfidenceModel<S> for &M {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        (**self).confidences(query)
    }
}

impl<S: Scalar, M: ConfidenceModel<S> + ?Sized> ConfidenceModel<S> for Arc<M> {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        (**self).confidences(query)
    }
}

impl<S: Scalar, M: ConfidenceModel<S> + ?Sized> ConfidenceModel<S> for Box<M> {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        (**self).confidences(query)
    }
}

/// Equal confidence in every action; identical to an all-zero network.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformModel;

impl<S: Scalar> ConfidenceModel<S> for UniformModel {
    fn confidences(&self, _: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        Ok(ConfidenceVector::uniform())
    }
}

/// Puts probability one on the planner's next action.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleMimic {
    pub limits: PlannerLimits,
}

impl<S: Scalar> ConfidenceModel<S> for OracleMimic {
    fn confidences(&self, query: &StepQuery<'_, S>) -> Result<ConfidenceVector<S>, PolicyError> {
        let mut probs = [S::zero(); NUM_ACTIONS];
        match plan_from(query.env, query.task, self.limits) {
            Ok(plan) if !plan.is_empty() => probs[plan.actions[0].index()] = S::one(),
            // nothing sensible to do: stay uniform
            _ => probs = [S::lit(1.0 / NUM_ACTIONS as f64); NUM_ACTIONS],
        }
        Ok(ConfidenceVector::from_probs(probs))
    }
}
