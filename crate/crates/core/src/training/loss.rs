//! Per-batch losses with their gradients on the logits.
//!
//! Every loss takes the batch's confidence vectors and returns the batch mean
//! together with `d(mean)/d(logits)` for each example. The threshold is a
//! constant throughout.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::gridworld::{Action, NUM_ACTIONS};
use crate::policy::ConfidenceVector;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<S> {
    pub value: S,
    pub logit_grads: Vec<[S; NUM_ACTIONS]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    CoFineLlm,
    Ua,
    ConfTr,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "cofinellm" => Ok(Method::CoFineLlm),
            "ua" => Ok(Method::Ua),
            "conftr" | "ui" => Ok(Method::ConfTr),
            other => Err(format!("unknown method `{other}` (expected cofinellm, ua or conftr)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Gate {
    Hard,
    Sigmoid { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub method: Method,
    pub lambda: f64,
    pub gate: Gate,
    pub alpha: f64,
    pub conftr_beta: f64,
    pub conftr_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            method: Method::CoFineLlm,
            lambda: 0.1,
            gate: Gate::Hard,
            alpha: 0.05,
            conftr_beta: 0.1,
            conftr_lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn ua() -> Self {
        LossConfig {
            method: Method::Ua,
            lambda: 0.0,
            ..Default::default()
        }
    }

    /// The CP weight actually applied.
    pub fn effective_lambda(&self) -> f64 {
        match self.method {
            Method::Ua => 0.0,
            _ => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value >= 0, got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if let Gate::Sigmoid { temperature } = self.gate {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return bad(format!("sigmoid temperature must be > 0, got {temperature}"));
            }
        }
        if !(self.conftr_beta > 0.0 && self.conftr_beta.is_finite()) {
            return bad(format!("conftr_beta must be > 0, got {}", self.conftr_beta));
        }
        if !(self.conftr_lambda >= 0.0 && self.conftr_lambda.is_finite()) {
            return bad(format!("conftr_lambda must be >= 0, got {}", self.conftr_lambda));
        }
        Ok(())
    }
}

fn check_batch<S>(confs: &[ConfidenceVector<S>], ys: &[Action]) -> Result<(), TrainError> {
    if confs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if confs.len() != ys.len() {
        return Err(TrainError::BatchMismatch {
            confidences: confs.len(),
            labels: ys.len(),
        });
    }
    Ok(())
}

/// Chain rule through softmax: `dz_j = p_j (g_j - sum_k p_k g_k)`.
pub fn softmax_pullback<S: Scalar>(p: &[S; NUM_ACTIONS], g: &[S; NUM_ACTIONS]) -> [S; NUM_ACTIONS] {
    let dot = p.iter().zip(g).fold(S::zero(), |acc, (&pk, &gk)| acc + pk * gk);
    std::array::from_fn(|j| p[j] * (g[j] - dot))
}

/// Most confident action other than `y`; the lowest index wins ties.
pub fn strongest_rival<S: Scalar>(p: &[S; NUM_ACTIONS], y: usize) -> usize {
    let mut best = if y == 0 { 1 } else { 0 };
    for k in 0..NUM_ACTIONS {
        if k != y && p[k] > p[best] {
            best = k;
        }
    }
    best
}

pub fn ce_loss<S: Scalar>(confs: &[ConfidenceVector<S>], ys: &[Action]) -> Result<LossValue<S>, TrainError> {
    check_batch(confs, ys)?;
    let inv_n = S::one() / S::lit(confs.len() as f64);
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(confs.len());
    for (c, &y) in confs.iter().zip(ys) {
        let y = y.index();
        total = total - c.log_probs[y];
        grads.push(std::array::from_fn(|j| {
            let indicator = if j == y { S::one() } else { S::zero() };
            (c.probs[j] - indicator) * inv_n
        }));
    }
    Ok(LossValue {
        value: total * inv_n,
        logit_grads: grads,
    })
}

/// One example's gated penalty and its gradient on the probabilities.
pub fn cp_term<S: Scalar>(p: &[S; NUM_ACTIONS], y: usize, delta: S, gate: Gate) -> (S, [S; NUM_ACTIONS]) {
    let mut g = [S::zero(); NUM_ACTIONS];
    let rival = strongest_rival(p, y);
    let margin = p[rival] - delta;
    if margin <= S::zero() {
        return (S::zero(), g);
    }
    match gate {
        Gate::Hard => {
            if p[y] >= delta {
                g[rival] = S::one();
                (margin, g)
            } else {
                (S::zero(), g)
            }
        }
        Gate::Sigmoid { temperature } => {
            let temp = S::lit(temperature);
            let psi = (temp * (p[y] - delta)).sigmoid();
            g[rival] = psi;
            g[y] = temp * psi * (S::one() - psi) * margin;
            (psi * margin, g)
        }
    }
}

pub fn cp_loss<S: Scalar>(
    confs: &[ConfidenceVector<S>],
    ys: &[Action],
    delta: S,
    gate: Gate,
) -> Result<LossValue<S>, TrainError> {
    check_batch(confs, ys)?;
    let inv_n = S::one() / S::lit(confs.len() as f64);
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(confs.len());
    for (c, &y) in confs.iter().zip(ys) {
        let (v, mut g) = cp_term(&c.probs, y.index(), delta, gate);
        total = total + v;
        g.iter_mut().for_each(|x| *x = *x * inv_n);
        grads.push(softmax_pullback(&c.probs, &g));
    }
    Ok(LossValue {
        value: total * inv_n,
        logit_grads: grads,
    })
}

pub const CONFTR_LOG_FLOOR: f64 = 1e-12;

/// One example's ConfTr loss and its gradient on the probabilities.
pub fn conftr_term<S: Scalar>(
    p: &[S; NUM_ACTIONS],
    y: usize,
    delta: S,
    beta: S,
    lambda_ui: S,
) -> (S, [S; NUM_ACTIONS]) {
    let c: [S; NUM_ACTIONS] = std::array::from_fn(|k| ((p[k] - delta) / beta).sigmoid());
    let sum: S = c.iter().copied().sum();
    let over = sum - S::one();
    let mut arg = S::one() - c[y];
    for k in 0..NUM_ACTIONS {
        if k != y {
            arg = arg + c[k];
        }
    }
    if over > S::zero() {
        arg = arg + lambda_ui * over;
    }
    let floor = S::lit(CONFTR_LOG_FLOOR);
    if arg <= floor {
        return (floor.ln(), [S::zero(); NUM_ACTIONS]);
    }
    let d_arg = S::one() / arg;
    let penalty = if over > S::zero() { lambda_ui } else { S::zero() };
    let g = std::array::from_fn(|k| {
        let d_c = if k == y { -S::one() } else { S::one() } + penalty;
        d_arg * d_c * c[k] * (S::one() - c[k]) / beta
    });
    (arg.ln(), g)
}

pub fn conftr_loss<S: Scalar>(
    confs: &[ConfidenceVector<S>],
    ys: &[Action],
    delta: S,
    beta: S,
    lambda_ui: S,
) -> Result<LossValue<S>, TrainError> {
    check_batch(confs, ys)?;
    let inv_n = S::one() / S::lit(confs.len() as f64);
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(confs.len());
    for (c, &y) in confs.iter().zip(ys) {
        let (v, mut g) = conftr_term(&c.probs, y.index(), delta, beta, lambda_ui);
        total = total + v;
        g.iter_mut().for_each(|x| *x = *x * inv_n);
        grads.push(softmax_pullback(&c.probs, &g));
    }
    Ok(LossValue {
        value: total * inv_n,
        logit_grads: grads,
    })
}

/// The objective of one method on one batch, with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss<S> {
    pub total: S,
    pub ce: S,
    /// Gated CP penalty (CoFineLLM) or ConfTr loss; zero for UA.
    pub regularizer: S,
    pub logit_grads: Vec<[S; NUM_ACTIONS]>,
}

/// `CE + lambda * CP`; for UA (or lambda = 0) this is exactly the CE loss.
pub fn combined_loss<S: Scalar>(
    confs: &[ConfidenceVector<S>],
    ys: &[Action],
    delta: S,
    config: &LossConfig,
) -> Result<BatchLoss<S>, TrainError> {
    let ce = ce_loss(confs, ys)?;
    let lambda = config.effective_lambda();
    if config.method == Method::ConfTr {
        let ui = conftr_loss(
            confs,
            ys,
            delta,
            S::lit(config.conftr_beta),
            S::lit(config.conftr_lambda),
        )?;
        return Ok(BatchLoss {
            total: ui.value,
            ce: ce.value,
            regularizer: ui.value,
            logit_grads: ui.logit_grads,
        });
    }
    if lambda == 0.0 {
        return Ok(BatchLoss {
            total: ce.value,
            ce: ce.value,
            regularizer: S::zero(),
            logit_grads: ce.logit_grads,
        });
    }
    let cp = cp_loss(confs, ys, delta, config.gate)?;
    let lam = S::lit(lambda);
    let grads = ce
        .logit_grads
        .iter()
        .zip(&cp.logit_grads)
        .map(|(a, b)| std::array::from_fn(|j| a[j] + lam * b[j]))
        .collect();
    Ok(BatchLoss {
        total: ce.value + lam * cp.value,
        ce: ce.value,
        regularizer: cp.value,
        logit_grads: grads,
    })
}
