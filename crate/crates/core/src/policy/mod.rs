//! Feed-forward softmax policy over the six actions.
//!
//! Weights are stored input-major (`w[i * outputs + j]`) so a sparse input
//! touches only the rows of its non-zero entries in both passes.

mod checkpoint;
mod optimizer;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{FeatureVector, FEATURE_DIM};
use crate::gridworld::{Action, NUM_ACTIONS};
use crate::scalar::Scalar;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use optimizer::{optimizer_step, Adam, AdamConfig};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("input dimension {got} does not match network input {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint architecture {found:?} does not match expected {expected:?}")]
    ArchitectureMismatch {
        expected: Box<Architecture>,
        found: Box<Architecture>,
    },
    #[error("checkpoint was written for {found}, loading as {expected}")]
    ScalarMismatch { expected: String, found: String },
    #[error("unsupported checkpoint `{format}` version {version}")]
    UnsupportedVersion { format: String, version: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    /// `FEATURE_DIM -> hidden... -> 6`.
    pub fn for_features(hidden: Vec<usize>) -> Self {
        Architecture {
            input_dim: FEATURE_DIM,
            hidden,
            outputs: NUM_ACTIONS,
            activation: Activation::Relu,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.outputs);
        w
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::for_features(vec![256, 256])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Layer<S> {
    pub inputs: usize,
    pub outputs: usize,
    /// Input-major: `weights[i * outputs + j]` connects input `i` to unit `j`.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> Layer<S> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            inputs,
            outputs,
            weights: vec![S::zero(); inputs * outputs],
            bias: vec![S::zero(); outputs],
        }
    }
}

/// Anything that can be fed to the first layer.
pub trait Input<S> {
    fn dim(&self) -> usize;
    fn for_each_nonzero(&self, f: impl FnMut(usize, S));
}

impl<S: Scalar> Input<S> for FeatureVector<S> {
    fn dim(&self) -> usize {
        FEATURE_DIM
    }
    fn for_each_nonzero(&self, mut f: impl FnMut(usize, S)) {
        for (i, v) in self.nonzeros() {
            f(i, v);
        }
    }
}

impl<S: Scalar> Input<S> for [S] {
    fn dim(&self) -> usize {
        self.len()
    }
    fn for_each_nonzero(&self, mut f: impl FnMut(usize, S)) {
        for (i, &v) in self.iter().enumerate() {
            if v != S::zero() {
                f(i, v);
            }
        }
    }
}

impl<S: Scalar> Input<S> for Vec<S> {
    fn dim(&self) -> usize {
        self.len()
    }
    fn for_each_nonzero(&self, f: impl FnMut(usize, S)) {
        self.as_slice().for_each_nonzero(f)
    }
}

/// Softmax output for one decision step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct ConfidenceVector<S> {
    pub probs: [S; NUM_ACTIONS],
    /// Log-softmax, computed without going through `probs`.
    pub log_probs: [S; NUM_ACTIONS],
}

impl<S: Scalar> ConfidenceVector<S> {
    pub fn from_logits(logits: &[S]) -> Self {
        assert_eq!(logits.len(), NUM_ACTIONS);
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let mut probs = [S::zero(); NUM_ACTIONS];
        let mut sum = S::zero();
        for (p, &z) in probs.iter_mut().zip(logits) {
            *p = (z - max).exp();
            sum = sum + *p;
        }
        let log_sum = sum.ln();
        let mut log_probs = [S::zero(); NUM_ACTIONS];
        for k in 0..NUM_ACTIONS {
            probs[k] = probs[k] / sum;
            log_probs[k] = logits[k] - max - log_sum;
        }
        ConfidenceVector { probs, log_probs }
    }

    /// Builds from probabilities directly; used for hand-specified cases.
    pub fn from_probs(probs: [S; NUM_ACTIONS]) -> Self {
        ConfidenceVector {
            probs,
            log_probs: probs.map(|p| p.ln()),
        }
    }

    pub fn uniform() -> Self {
        Self::from_logits(&[S::zero(); NUM_ACTIONS])
    }

    pub fn of(&self, a: Action) -> S {
        self.probs[a.index()]
    }

    /// Highest-confidence action, lowest index on ties.
    pub fn argmax(&self) -> Action {
        let mut best = 0;
        for k in 1..NUM_ACTIONS {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        Action::ALL[best]
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    /// Post-activation outputs of each hidden layer.
    hidden: Vec<Vec<S>>,
    pub logits: Vec<S>,
    pub confidences: ConfidenceVector<S>,
}

/// Parameters (weights and biases) of the policy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Mlp<S> {
    pub architecture: Architecture,
    pub layers: Vec<Layer<S>>,
    pub init_seed: u64,
}

/// Same shape as [`Mlp`]; holds d(loss)/d(parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Gradients<S> {
    pub layers: Vec<Layer<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(model: &Mlp<S>) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = S::zero());
            l.bias.iter_mut().for_each(|b| *b = S::zero());
        }
    }

    pub fn scale(&mut self, c: S) {
        for v in self.values_mut() {
            *v = *v * c;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = S> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut S> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn l2_norm(&self) -> S {
        self.values().map(|v| v * v).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

fn activate<S: Scalar>(act: Activation, x: S) -> S {
    match act {
        Activation::Relu => x.max(S::zero()),
        Activation::Tanh => x.tanh(),
    }
}

/// Derivative expressed through the activation output.
fn activation_slope<S: Scalar>(act: Activation, y: S) -> S {
    match act {
        Activation::Relu => {
            if y > S::zero() {
                S::one()
            } else {
                S::zero()
            }
        }
        Activation::Tanh => S::one() - y * y,
    }
}

impl<S: Scalar> Mlp<S> {
    /// Uniform fan-in initialization: weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(architecture: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = architecture.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let mut layer = Layer::zeros(w[0], w[1]);
                let bound = 1.0 / (w[0] as f64).sqrt();
                for v in &mut layer.weights {
                    *v = S::lit(rng.gen_range(-bound..bound));
                }
                layer
            })
            .collect();
        Mlp {
            architecture,
            layers,
            init_seed: seed,
        }
    }

    /// All-zero parameters: the uniform policy.
    pub fn zeros(architecture: Architecture) -> Self {
        let layers = architecture
            .widths()
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Mlp {
            architecture,
            layers,
            init_seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = S> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut S> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn forward<I: Input<S> + ?Sized>(&self, input: &I) -> Result<ConfidenceVector<S>, PolicyError> {
        Ok(self.forward_trace(input)?.confidences)
    }

    pub fn forward_trace<I: Input<S> + ?Sized>(&self, input: &I) -> Result<ForwardTrace<S>, PolicyError> {
        if input.dim() != self.input_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.input_dim(),
                got: input.dim(),
            });
        }
        let act = self.architecture.activation;
        let n = self.layers.len();
        let mut hidden: Vec<Vec<S>> = Vec::with_capacity(n - 1);

        let first = &self.layers[0];
        let mut out = first.bias.clone();
        input.for_each_nonzero(|i, x| {
            let row = &first.weights[i * first.outputs..(i + 1) * first.outputs];
            for (o, &w) in out.iter_mut().zip(row) {
                *o = *o + x * w;
            }
        });
        for layer in &self.layers[1..] {
            out.iter_mut().for_each(|v| *v = activate(act, *v));
            let mut next = layer.bias.clone();
            for (i, &x) in out.iter().enumerate() {
                if x == S::zero() {
                    continue;
                }
                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                for (o, &w) in next.iter_mut().zip(row) {
                    *o = *o + x * w;
                }
            }
            hidden.push(std::mem::replace(&mut out, next));
        }
        Ok(ForwardTrace {
            confidences: ConfidenceVector::from_logits(&out),
            logits: out,
            hidden,
        })
    }

    /// Adds `d(upstream . logits)/d(params)` into `grads`.
    pub fn accumulate_backward<I: Input<S> + ?Sized>(
        &self,
        input: &I,
        trace: &ForwardTrace<S>,
        upstream: &[S],
        grads: &mut Gradients<S>,
    ) -> Result<(), PolicyError> {
        if upstream.len() != self.architecture.outputs {
            return Err(PolicyError::DimensionMismatch {
                expected: self.architecture.outputs,
                got: upstream.len(),
            });
        }
        if !upstream.iter().all(|g| g.is_finite()) {
            return Err(PolicyError::NonFinite("upstream logit gradient"));
        }
        let act = self.architecture.activation;
        let mut delta: Vec<S> = upstream.to_vec();
        for li in (1..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let g = &mut grads.layers[li];
            let x = &trace.hidden[li - 1];
            for (gb, &d) in g.bias.iter_mut().zip(&delta) {
                *gb = *gb + d;
            }
            let mut back = vec![S::zero(); layer.inputs];
            for (i, &xi) in x.iter().enumerate() {
                let row = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                let grow = &mut g.weights[i * layer.outputs..(i + 1) * layer.outputs];
                let mut acc = S::zero();
                for j in 0..layer.outputs {
                    grow[j] = grow[j] + xi * delta[j];
                    acc = acc + row[j] * delta[j];
                }
                back[i] = acc * activation_slope(act, xi);
            }
            delta = back;
        }
        let g = &mut grads.layers[0];
        for (gb, &d) in g.bias.iter_mut().zip(&delta) {
            *gb = *gb + d;
        }
        let outputs = g.outputs;
        input.for_each_nonzero(|i, x| {
            let grow = &mut g.weights[i * outputs..(i + 1) * outputs];
            for (gw, &d) in grow.iter_mut().zip(&delta) {
                *gw = *gw + x * d;
            }
        });
        Ok(())
    }

    /// Gradient of `upstream . logits(features)` with respect to the parameters.
    pub fn backward<I: Input<S> + ?Sized>(&self, input: &I, upstream: &[S]) -> Result<Gradients<S>, PolicyError> {
        let trace = self.forward_trace(input)?;
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_backward(input, &trace, upstream, &mut grads)?;
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn small(act: Activation) -> Architecture {
        Architecture {
            input_dim: 8,
            hidden: vec![4, 4],
            outputs: 6,
            activation: act,
        }
    }

    #[test]
    fn zero_params_give_uniform() {
        let m: Mlp<f64> = Mlp::zeros(Architecture::default());
        let c = m.forward(&vec![0.5; FEATURE_DIM]).unwrap();
        for p in c.probs {
            assert_eq!(p, 1.0 / 6.0);
        }
        assert_eq!(c, ConfidenceVector::uniform());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m: Mlp<f64> = Mlp::init(small(Activation::Relu), 1);
        assert!(matches!(
            m.forward(&vec![0.0; 7]),
            Err(PolicyError::DimensionMismatch { expected: 8, got: 7 })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m: Mlp<f64> = Mlp::init(small(Activation::Tanh), 3);
        let g = m.backward(&vec![0.3; 8], &[0.0; 6]).unwrap();
        assert!(g.values().all(|v| v == 0.0));
        assert!(m.backward(&vec![0.3; 8], &[f64::NAN, 0., 0., 0., 0., 0.]).is_err());
    }

    #[test]
    fn duplicate_example_doubles_gradient() {
        let m: Mlp<f64> = Mlp::init(small(Activation::Relu), 5);
        let x = vec![0.1, 0.9, 0.0, 0.4, 1.0, 0.2, 0.0, 0.7];
        let up = [0.2, -0.1, 0.05, 0.3, -0.25, -0.2];
        let trace = m.forward_trace(&x).unwrap();
        let mut twice = Gradients::zeros_like(&m);
        m.accumulate_backward(&x, &trace, &up, &mut twice).unwrap();
        m.accumulate_backward(&x, &trace, &up, &mut twice).unwrap();
        let mut once = m.backward(&x, &up).unwrap();
        once.scale(2.0);
        assert_eq!(once, twice);
    }

    /// Central differences of `upstream . logits` against the analytic pass.
    fn check_fd(act: Activation, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Mlp<f64> = Mlp::init(small(act), seed);
        // random biases keep ReLU pre-activations away from the kink at 0
        for l in &mut m.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let up: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scalar = |m: &Mlp<f64>| {
            let t = m.forward_trace(&x).unwrap();
            t.logits.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        let analytic: Vec<f64> = m.backward(&x, &up).unwrap().values().collect();
        let h = 1e-5;
        let mut probe = m.clone();
        let n = m.n_params();
        for k in 0..n {
            let orig = probe.values().nth(k).unwrap();
            *probe.values_mut().nth(k).unwrap() = orig + h;
            let plus = scalar(&probe);
            *probe.values_mut().nth(k).unwrap() = orig - h;
            let minus = scalar(&probe);
            *probe.values_mut().nth(k).unwrap() = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-6);
            assert!(err < 1e-4, "param {k}: fd {numeric} vs {}", analytic[k]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..25 {
            check_fd(Activation::Tanh, seed);
            check_fd(Activation::Relu, 100 + seed);
        }
    }

    #[test]
    fn sparse_and_dense_inputs_agree() {
        let m: Mlp<f64> = Mlp::init(Architecture::for_features(vec![16, 8]), 2);
        let s = crate::gridworld::sample_scenario(1, crate::gridworld::DistributionTag::D).unwrap();
        let fv = crate::encoding::encode_features::<f64>(&s.environment, &s.task, &[], 0);
        let dense = fv.to_dense();
        assert_eq!(m.forward(&fv).unwrap(), m.forward(&dense).unwrap());
        let up = [0.1, 0.2, -0.3, 0.0, 0.4, -0.4];
        assert_eq!(m.backward(&fv, &up).unwrap(), m.backward(&dense, &up).unwrap());
    }

    #[test]
    fn f32_network_runs() {
        let m: Mlp<f32> = Mlp::init(small(Activation::Relu), 9);
        let c = m.forward(&vec![0.5f32; 8]).unwrap();
        assert!((c.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            logits in proptest::array::uniform6(-30.0f64..30.0),
            shift in -50.0f64..50.0,
        ) {
            let c = ConfidenceVector::from_logits(&logits);
            prop_assert!((c.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
            let d = ConfidenceVector::from_logits(&shifted);
            for k in 0..6 {
                prop_assert!((c.probs[k] - d.probs[k]).abs() < 1e-12);
                prop_assert!((c.log_probs[k] - c.probs[k].ln()).abs() < 1e-9);
            }
        }

        #[test]
        fn forward_is_normalized_and_deterministic(seed in 0u64..1000, xs in proptest::collection::vec(0.0f64..1.0, 8)) {
            let m: Mlp<f64> = Mlp::init(small(Activation::Relu), seed);
            let a = m.forward(&xs).unwrap();
            prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(a, m.forward(&xs).unwrap());
        }
    }
}
