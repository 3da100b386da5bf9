//! Central-difference gradient checks through a small tanh network.

use cofine_core::gridworld::Action;
use cofine_core::policy::{Activation, Architecture, ConfidenceVector, Gradients, Mlp};
use cofine_core::training::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const CONFIGS: usize = 100;

#[derive(Clone, Copy, Debug)]
pub enum Which {
    Ce,
    CpHard,
    CpSigmoid(f64),
    Combined(Gate, f64),
    ConfTr(f64, f64),
}

fn batch_loss(which: Which, confs: &[ConfidenceVector<f64>], ys: &[Action], delta: f64) -> LossValue<f64> {
    match which {
        Which::Ce => ce_loss(confs, ys).unwrap(),
        Which::CpHard => cp_loss(confs, ys, delta, Gate::Hard).unwrap(),
        Which::CpSigmoid(t) => cp_loss(confs, ys, delta, Gate::Sigmoid { temperature: t }).unwrap(),
        Which::Combined(gate, lambda) => {
            let cfg = LossConfig { lambda, gate, ..Default::default() };
            let v = combined_loss(confs, ys, delta, &cfg).unwrap();
            LossValue { value: v.total, logit_grads: v.logit_grads }
        }
        Which::ConfTr(beta, lam) => conftr_loss(confs, ys, delta, beta, lam).unwrap(),
    }
}

/// Distance from a point where the loss is not differentiable.
fn kink_distance(which: Which, confs: &[ConfidenceVector<f64>], ys: &[Action], delta: f64) -> f64 {
    let mut d = f64::INFINITY;
    for (c, y) in confs.iter().zip(ys) {
        let p = &c.probs;
        let y = y.index();
        let r = strongest_rival(p, y);
        let second = (0..6).filter(|&k| k != y && k != r).map(|k| p[r] - p[k]).fold(f64::INFINITY, f64::min);
        match which {
            Which::Ce => {}
            Which::CpHard | Which::Combined(Gate::Hard, _) => {
                d = d.min((p[r] - delta).abs()).min((p[y] - delta).abs()).min(second);
            }
            Which::CpSigmoid(_) | Which::Combined(Gate::Sigmoid { .. }, _) => {
                d = d.min((p[r] - delta).abs()).min(second);
            }
            Which::ConfTr(beta, _) => {
                let s: f64 = p.iter().map(|&q| 1.0 / (1.0 + (-(q - delta) / beta).exp())).sum();
                d = d.min((s - 1.0).abs());
            }
        }
    }
    d
}

struct Case {
    model: Mlp<f64>,
    inputs: Vec<Vec<f64>>,
    ys: Vec<Action>,
    delta: f64,
}

fn loss_of(which: Which, model: &Mlp<f64>, case: &Case) -> f64 {
    let confs: Vec<_> = case.inputs.iter().map(|x| model.forward(x).unwrap()).collect();
    batch_loss(which, &confs, &case.ys, case.delta).value
}

fn analytic(which: Which, case: &Case) -> Gradients<f64> {
    let traces: Vec<_> = case.inputs.iter().map(|x| case.model.forward_trace(x).unwrap()).collect();
    let confs: Vec<_> = traces.iter().map(|t| t.confidences).collect();
    let v = batch_loss(which, &confs, &case.ys, case.delta);
    let mut g = Gradients::zeros_like(&case.model);
    for ((x, t), lg) in case.inputs.iter().zip(&traces).zip(&v.logit_grads) {
        case.model.accumulate_backward(x, t, lg, &mut g).unwrap();
    }
    g
}

fn random_case(rng: &mut ChaCha8Rng, which: Which) -> Case {
    let arch = Architecture {
        input_dim: 8,
        hidden: vec![4, 4],
        outputs: 6,
        activation: Activation::Tanh,
    };
    let mut model = Mlp::init(arch, rng.gen());
    let scale = rng.gen_range(0.3..1.5);
    for v in model.values_mut() {
        *v = rng.gen_range(-1.0..1.0) * scale;
    }
    let n = rng.gen_range(1..6);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..8).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
    let mut ys: Vec<Action> = (0..n).map(|_| Action::ALL[rng.gen_range(0..6)]).collect();
    // bias part of the batch toward the branches where the regularizers are active
    let confs: Vec<_> = inputs.iter().map(|x| model.forward(x).unwrap()).collect();
    for (y, c) in ys.iter_mut().zip(&confs) {
        if rng.gen_bool(0.5) {
            *y = c.argmax();
        }
    }
    let delta = match which {
        Which::ConfTr(..) => rng.gen_range(0.0..0.8),
        Which::Ce => 0.5,
        _ => {
            // open the gate on one example: truth is its argmax and delta sits
            // below its runner-up
            let j = rng.gen_range(0..n);
            let c = &confs[j];
            ys[j] = c.argmax();
            let rival = strongest_rival(&c.probs, ys[j].index());
            if rng.gen_bool(0.8) {
                rng.gen_range(0.0..c.probs[rival])
            } else {
                rng.gen_range(0.0..0.9)
            }
        }
    };
    Case { model, inputs, ys, delta }
}

pub fn run_suite(which: Which, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = 0;
    let mut active = 0;
    let mut attempts = 0;
    while accepted < CONFIGS {
        attempts += 1;
        assert!(attempts < 50 * CONFIGS, "too many configurations near kinks");
        let case = random_case(&mut rng, which);
        let confs: Vec<_> = case.inputs.iter().map(|x| case.model.forward(x).unwrap()).collect();
        if kink_distance(which, &confs, &case.ys, case.delta) < 1e-3 {
            continue;
        }
        accepted += 1;
        let g = analytic(which, &case);
        if g.l2_norm() > 0.0 {
            active += 1;
        }
        let analytic_vals: Vec<f64> = g.values().collect();
        for (k, &a) in analytic_vals.iter().enumerate() {
            let mut plus = case.model.clone();
            *plus.values_mut().nth(k).unwrap() += H;
            let mut minus = case.model.clone();
            *minus.values_mut().nth(k).unwrap() -= H;
            let numeric = (loss_of(which, &plus, &case) - loss_of(which, &minus, &case)) / (2.0 * H);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < REL_TOL,
                "{which:?} config {accepted} param {k}: analytic {a:e} numeric {numeric:e} rel {rel:e}"
            );
        }
    }
    assert!(active * 2 >= CONFIGS, "{which:?}: only {active} configurations had a non-zero gradient");
}
