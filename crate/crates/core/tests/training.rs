use std::sync::Arc;

use cofine_core::conformal::Threshold;
use cofine_core::encoding::{build_dataset, split_seed, Dataset, Split};
use cofine_core::gridworld::{DistributionTag, TaskFamily};
use cofine_core::policy::{Architecture, Checkpoint, Mlp};
use cofine_core::training::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(n: usize, split: Split) -> Dataset<f64> {
    build_dataset(n, DistributionTag::D, split_seed(99, split)).unwrap()
}

fn tiny_model(seed: u64) -> Mlp<f64> {
    Mlp::init(Architecture::for_features(vec![8]), seed)
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        curriculum: CurriculumSchedule::flat(),
        patience: None,
        ..Default::default()
    }
}

#[derive(Default)]
struct Recorder {
    refreshes: Vec<(usize, Arc<Threshold<f64>>)>,
    batches: Vec<(usize, Arc<Threshold<f64>>)>,
    epochs: Vec<EpochMetrics>,
}

impl TrainObserver<f64> for Recorder {
    fn on_refresh(&mut self, epoch: usize, threshold: &Arc<Threshold<f64>>) {
        self.refreshes.push((epoch, threshold.clone()));
    }
    fn on_batch(&mut self, epoch: usize, _batch: usize, threshold: &Arc<Threshold<f64>>) {
        self.batches.push((epoch, threshold.clone()));
    }
    fn on_epoch(&mut self, metrics: &EpochMetrics) {
        self.epochs.push(metrics.clone());
    }
}

#[test]
fn threshold_refresh_schedule_and_identity() {
    let train = data(12, Split::Train);
    let calib = data(10, Split::Calibration);
    let mut rec = Recorder::default();
    let state = finetune(
        tiny_model(1),
        &train,
        &calib,
        &LossConfig::default(),
        &quick_config(30),
        TrainHooks {
            observer: Some(&mut rec),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(state.refresh_epochs, vec![1, 11, 21]);
    assert_eq!(rec.refreshes.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 11, 21]);
    for (epoch, th) in &rec.batches {
        let window = rec.refreshes.iter().rev().find(|(e, _)| e <= epoch).unwrap();
        assert!(Arc::ptr_eq(th, &window.1), "epoch {epoch} used a different threshold object");
    }
    assert_eq!(rec.epochs.len(), 30);
    assert!(rec.epochs.iter().all(|m| m.threshold_refreshed == [1, 11, 21].contains(&m.epoch)));
    assert!(Arc::ptr_eq(&state.threshold, &rec.refreshes[2].1));
}

#[test]
fn ua_equals_zero_lambda_and_runs_are_reproducible() {
    let train = data(15, Split::Train);
    let calib = data(10, Split::Calibration);
    let cfg = quick_config(4);
    let run = |loss: LossConfig| {
        finetune(tiny_model(5), &train, &calib, &loss, &cfg, TrainHooks::default()).unwrap()
    };
    let ua = run(LossConfig::ua());
    let zero = run(LossConfig {
        lambda: 0.0,
        ..Default::default()
    });
    assert_eq!(ua.model, zero.model);
    assert_eq!(ua.history.iter().map(|m| m.ce).collect::<Vec<_>>(), zero.history.iter().map(|m| m.ce).collect::<Vec<_>>());

    let a = run(LossConfig::default());
    let b = run(LossConfig::default());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_ne!(a.model, ua.model);
}

#[test]
fn training_ce_falls_during_first_phase() {
    let train = data(300, Split::Train);
    let calib = data(40, Split::Calibration);
    let cfg = TrainConfig {
        epochs: 5,
        ..Default::default()
    };
    let state = finetune(
        Mlp::init(Architecture::default(), 3),
        &train,
        &calib,
        &LossConfig::default(),
        &cfg,
        TrainHooks::default(),
    )
    .unwrap();
    let mut ces: Vec<f64> = state.history.iter().map(|m| m.ce).collect();
    assert!(state.history.iter().all(|m| m.phase == 0));
    let first = ces[0];
    ces.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(ces[ces.len() / 2] < first, "median {} vs first {}", ces[ces.len() / 2], first);
}

#[test]
fn curriculum_examples() {
    let ds = data(2200, Split::Train);
    let count = |f: TaskFamily| ds.entries.iter().filter(|e| e.scenario.task.family == f).count();
    assert!(count(TaskFamily::PickUpThenGoTo) > 500);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cur = Curriculum::new(&ds, CurriculumSchedule::default(), &mut rng);
    let families = |epoch: usize| {
        let mut c = [0usize; 4];
        for i in cur.active_entries(epoch) {
            c[ds.entries[i].scenario.task.family.index()] += 1;
        }
        c
    };
    assert_eq!(families(1), [count(TaskFamily::GoTo), 0, 0, 0]);
    assert_eq!(families(5), families(1));
    assert_eq!(families(6), [100, count(TaskFamily::PickUp), 0, 0]);
    assert_eq!(families(11), [100, 100, count(TaskFamily::PickUpThenGoTo), 0]);
    assert_eq!(families(25), [100, 100, 500, count(TaskFamily::PutNext)]);

    // retained subsets are fixed for the whole run
    let goto_at = |epoch: usize| {
        cur.active_entries(epoch)
            .into_iter()
            .filter(|&i| ds.entries[i].scenario.task.family == TaskFamily::GoTo)
            .collect::<Vec<_>>()
    };
    assert_eq!(goto_at(6), goto_at(40));

    let steps = curriculum_filter(&ds, 1, &cur);
    let expected: usize = ds
        .entries
        .iter()
        .filter(|e| e.scenario.task.family == TaskFamily::GoTo)
        .map(|e| e.steps.len())
        .sum();
    assert_eq!(steps.len(), expected);
}

#[test]
fn schedule_validation() {
    let mut s = CurriculumSchedule::default();
    assert!(s.validate().is_ok());
    s.phase_start_epochs = vec![1, 6, 6, 21];
    assert!(s.validate().is_err());
    let mut s = CurriculumSchedule::default();
    s.retained_per_phase[1] = 0;
    assert!(s.validate().is_err());
    assert_eq!(CurriculumSchedule::default().phase(25), 3);
    assert_eq!(CurriculumSchedule::default().phase(10), 1);

    let bad = TrainConfig {
        refresh_period: 0,
        ..Default::default()
    };
    assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
    let bad = LossConfig {
        gate: Gate::Sigmoid { temperature: 0.0 },
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = LossConfig {
        lambda: -1.0,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn run_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let train = data(8, Split::Train);
    let calib = data(6, Split::Calibration);
    let cfg = TrainConfig {
        refresh_period: 2,
        ..quick_config(5)
    };
    let state = finetune(
        tiny_model(2),
        &train,
        &calib,
        &LossConfig::default(),
        &cfg,
        TrainHooks {
            run_dir: Some(dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    let config: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(config["train"]["epochs"], 5);
    assert_eq!(config["scalar"], "f64");
    let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let lines: Vec<EpochMetrics> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, state.history);
    for e in [1, 3, 5] {
        assert!(dir.path().join(format!("checkpoint-epoch-{e:03}.json")).exists());
    }
    let fin: Checkpoint<f64> = Checkpoint::load(dir.path().join("final.json"), Some(&state.model.architecture)).unwrap();
    assert_eq!(fin.params, state.model);
}

#[test]
fn nan_parameters_fail_calibration() {
    let train = data(5, Split::Train);
    let calib = data(5, Split::Calibration);
    let mut model = tiny_model(4);
    model.layers[1].bias[0] = f64::NAN;
    let err = finetune(model, &train, &calib, &LossConfig::ua(), &quick_config(2), TrainHooks::default());
    assert!(matches!(err, Err(TrainError::Conformal(_))), "{err:?}");
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let train = data(10, Split::Train);
    let calib = data(5, Split::Calibration);
    let mut cfg = quick_config(3);
    cfg.optimizer.learning_rate = 1e300;
    let err = finetune(
        tiny_model(6),
        &train,
        &calib,
        &LossConfig::default(),
        &cfg,
        TrainHooks {
            run_dir: Some(dir.path()),
            ..Default::default()
        },
    );
    match err {
        Err(TrainError::NonFinite { epoch, diagnostic, .. }) => {
            assert_eq!(epoch, diagnostic.epoch);
            assert!(dir.path().join("diverged.json").exists());
            assert!(dir.path().join("diverged-checkpoint.json").exists());
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn monitor_split_and_early_stopping() {
    let train = data(40, Split::Train);
    let calib = data(10, Split::Calibration);
    let (tr, mon) = split_monitor(train.clone(), 0.1);
    assert_eq!(tr.len(), 36);
    assert_eq!(mon.len(), 4);
    assert!(tr.entries.iter().all(|e| mon.entries.iter().all(|m| m.scenario.id != e.scenario.id)));
    let cfg = TrainConfig {
        patience: Some(2),
        ..quick_config(200)
    };
    let state = finetune(
        tiny_model(7),
        &tr,
        &calib,
        &LossConfig::ua(),
        &cfg,
        TrainHooks {
            monitor: Some(&mon),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(state.stopped_early);
    assert!(state.epoch < 200);
    let best = state
        .history
        .iter()
        .min_by(|a, b| a.monitor_ce.partial_cmp(&b.monitor_ce).unwrap())
        .unwrap();
    assert_eq!(state.model_epoch, best.epoch);
    assert_eq!(state.epoch, best.epoch + 2);
    let ce = mean_ce(&state.model, &mon).unwrap();
    assert!((ce - best.monitor_ce.unwrap()).abs() < 1e-12);
}
