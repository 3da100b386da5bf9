use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Duration;

use cofine_cli::protocol::{
    ClientMessage, Envelope, ServerEvent, SessionCreated, SessionSnapshot, SessionStatus, StartSession, ValidationKind,
};
use cofine_cli::server::{self, AppState, ScenarioSource, ServeConfig, SharedModel};
use cofine_core::conformal::Threshold;
use cofine_core::evaluation::{rollout, Outcome, OracleHelp};
use cofine_core::gridworld::{plan_from, sample_scenario, simulate, Action, DistributionTag, PlannerLimits};
use cofine_core::model::{ConfidenceModel, StepQuery};
use cofine_core::policy::{ConfidenceVector, PolicyError};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// Same confidences at every step: three actions above 0.1, three below.
struct FixedModel;

impl ConfidenceModel<f64> for FixedModel {
    fn confidences(&self, _: &StepQuery<'_, f64>) -> Result<ConfidenceVector<f64>, PolicyError> {
        Ok(ConfidenceVector::from_probs([0.3, 0.05, 0.3, 0.3, 0.03, 0.02]))
    }
}

async fn start(model: SharedModel, delta: f64, timeout: Duration) -> String {
    let state = AppState::new(
        model,
        Threshold::fixed(delta),
        ScenarioSource::Sampled(DistributionTag::D),
        ServeConfig {
            disconnect_timeout: timeout,
            max_steps: None,
        },
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(server::serve(state, listener));
    format!("{addr}")
}

async fn create(addr: &str, seed: u64) -> SessionCreated {
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/sessions"))
        .json(&StartSession {
            index: None,
            seed: Some(seed),
        })
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 201);
    resp.json().await.unwrap()
}

async fn snapshot(addr: &str, id: u64) -> SessionSnapshot {
    reqwest::get(format!("http://{addr}/sessions/{id}"))
        .await
        .unwrap()
        .json()
        .await
        .unwrap()
}

async fn connect(addr: &str, id: u64) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws"))
        .await
        .unwrap()
        .0
}

async fn next_event(ws: &mut Ws) -> ServerEvent {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("event within 10 s")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = msg {
            let env: Envelope<ServerEvent> = serde_json::from_str(&t).unwrap();
            assert_eq!(env.v, 1);
            return env.body;
        }
    }
}

/// Reads events until a help request or the end of the rollout.
async fn until_blocking(ws: &mut Ws) -> ServerEvent {
    loop {
        let e = next_event(ws).await;
        if matches!(e, ServerEvent::HelpRequest { .. } | ServerEvent::Finished { .. }) {
            return e;
        }
    }
}

async fn send(ws: &mut Ws, msg: ClientMessage) {
    let text = serde_json::to_string(&Envelope::new(msg)).unwrap();
    ws.send(Message::Text(text.into())).await.unwrap();
}

#[tokio::test]
async fn help_request_lists_exactly_the_set() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_secs(300)).await;
    let created = create(&addr, 5).await;
    assert_eq!(snapshot(&addr, created.session_id).await.status, SessionStatus::Idle);
    let mut ws = connect(&addr, created.session_id).await;
    match next_event(&mut ws).await {
        ServerEvent::StateUpdate { step, history, .. } => {
            assert_eq!(step, 0);
            assert!(history.is_empty());
        }
        other => panic!("expected state_update, got {other:?}"),
    }
    match next_event(&mut ws).await {
        ServerEvent::HelpRequest {
            step,
            prediction_set,
            confidences,
            prompt_text,
            grid_snapshot,
            delta,
            ..
        } => {
            assert_eq!(step, 0);
            assert_eq!(prediction_set, vec![0, 2, 3]);
            assert_eq!(confidences, [0.3, 0.05, 0.3, 0.3, 0.03, 0.02]);
            assert!(prompt_text.contains(&created.mission));
            assert_eq!(grid_snapshot.cells.len(), grid_snapshot.width * grid_snapshot.height);
            assert_eq!(delta, 0.1);
        }
        other => panic!("expected help_request, got {other:?}"),
    }
}

#[tokio::test]
async fn invalid_choices_are_rejected_without_side_effects() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_secs(300)).await;
    let id = create(&addr, 6).await.session_id;
    let mut ws = connect(&addr, id).await;
    assert!(matches!(until_blocking(&mut ws).await, ServerEvent::HelpRequest { .. }));
    let before = snapshot(&addr, id).await;
    assert_eq!(before.status, SessionStatus::AwaitingHelp);

    let probes = [
        (ClientMessage::ChooseAction { step: 0, action_index: 1 }, ValidationKind::NotInSet),
        (ClientMessage::ChooseAction { step: 0, action_index: 9 }, ValidationKind::NotInSet),
        (ClientMessage::ChooseAction { step: 3, action_index: 0 }, ValidationKind::StaleStep),
    ];
    for (msg, kind) in probes {
        send(&mut ws, msg).await;
        match next_event(&mut ws).await {
            ServerEvent::Validation { error, pending_step, .. } => {
                assert_eq!(error, kind);
                assert_eq!(pending_step, Some(0));
            }
            other => panic!("expected validation, got {other:?}"),
        }
        assert_eq!(snapshot(&addr, id).await, before);
    }
    ws.send(Message::Text("{\"v\":2,\"type\":\"abort\"}".into())).await.unwrap();
    assert!(matches!(
        next_event(&mut ws).await,
        ServerEvent::Validation {
            error: ValidationKind::BadMessage,
            ..
        }
    ));
    assert_eq!(snapshot(&addr, id).await, before);

    send(&mut ws, ClientMessage::ChooseAction { step: 0, action_index: 2 }).await;
    match next_event(&mut ws).await {
        ServerEvent::StateUpdate {
            history, last_executed, ..
        } => {
            assert_eq!(history, vec![2]);
            let last = last_executed.unwrap();
            assert_eq!((last.step, last.action_index), (0, 2));
        }
        other => panic!("expected state_update, got {other:?}"),
    }
    match next_event(&mut ws).await {
        ServerEvent::HelpRequest { step, .. } => assert_eq!(step, 1),
        other => panic!("expected help_request, got {other:?}"),
    }
    send(&mut ws, ClientMessage::Abort).await;
    let finished = until_blocking(&mut ws).await;
    assert!(matches!(
        finished,
        ServerEvent::Finished {
            outcome: Outcome::Aborted,
            ..
        }
    ));
    let after = snapshot(&addr, id).await;
    assert_eq!(after.status, SessionStatus::Finished);
    assert_eq!(after.outcome, Some(Outcome::Aborted));
}

#[tokio::test]
async fn no_model_step_while_help_is_pending() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_secs(300)).await;
    let id = create(&addr, 7).await.session_id;
    let mut ws = connect(&addr, id).await;
    assert!(matches!(until_blocking(&mut ws).await, ServerEvent::HelpRequest { .. }));
    let a = snapshot(&addr, id).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    let b = snapshot(&addr, id).await;
    assert_eq!(a, b);
    assert_eq!(a.step, 0);
    assert!(a.pending.is_some());
}

/// Planner-based confidences perturbed by a hash of the state, so sets
/// cover every case: correct singletons, help with and without the truth,
/// and confidently wrong singletons.
struct NoisyOracle;

impl ConfidenceModel<f64> for NoisyOracle {
    fn confidences(&self, q: &StepQuery<'_, f64>) -> Result<ConfidenceVector<f64>, PolicyError> {
        let Ok(plan) = plan_from(q.env, q.task, PlannerLimits::default()) else {
            return Ok(ConfidenceVector::uniform());
        };
        let Some(&truth) = plan.actions.first() else {
            return Ok(ConfidenceVector::uniform());
        };
        let mut h = DefaultHasher::new();
        (q.env, q.t).hash(&mut h);
        let y = truth.index();
        let mut p = [0.05; 6];
        let mut put = |i: usize, v: f64| p[i % 6] = v;
        match h.finish() % 10 {
            0..=4 => put(y, 0.75),
            5..=7 => {
                put(y, 0.4);
                put(y + 1, 0.35);
            }
            8 => {
                put(y + 2, 0.4);
                put(y + 3, 0.35);
            }
            _ => put(y + 1, 0.75),
        }
        let z: f64 = p.iter().sum();
        Ok(ConfidenceVector::from_probs(p.map(|v| v / z)))
    }
}

/// Answers every help request with the planner's action, aborting when it is
/// outside the set, and returns the executed actions and outcome.
async fn scripted_session(addr: &str, seed: u64) -> (Vec<Action>, Outcome) {
    let scenario = sample_scenario(seed, DistributionTag::D).unwrap();
    let id = create(addr, seed).await.session_id;
    let mut ws = connect(addr, id).await;
    let mut history: Vec<Action> = Vec::new();
    loop {
        match next_event(&mut ws).await {
            ServerEvent::StateUpdate { history: h, .. } => {
                history = h.iter().map(|&i| Action::from_index(i).unwrap()).collect();
            }
            ServerEvent::HelpRequest {
                step, prediction_set, ..
            } => {
                assert_eq!(step, history.len());
                let env = simulate(&scenario.environment, &history);
                let truth = OracleHelp::default().correct_action(&env, &scenario);
                match truth {
                    Some(a) if prediction_set.contains(&a.index()) => {
                        send(&mut ws, ClientMessage::ChooseAction { step, action_index: a.index() }).await
                    }
                    _ => send(&mut ws, ClientMessage::Abort).await,
                }
            }
            ServerEvent::Finished { outcome, steps_taken, .. } => {
                assert_eq!(steps_taken, history.len());
                return (history, outcome);
            }
            ServerEvent::Validation { message, .. } => panic!("unexpected validation: {message}"),
        }
    }
}

#[tokio::test]
async fn scripted_client_reproduces_oracle_rollouts() {
    let policy = NoisyOracle;
    let delta = 0.2;
    let addr = start(Arc::new(NoisyOracle), delta, Duration::from_secs(300)).await;
    let th = Threshold::fixed(delta);
    let mut outcomes = std::collections::HashMap::new();
    for seed in 100..120 {
        let scenario = sample_scenario(seed, DistributionTag::D).unwrap();
        let oracle = rollout(&policy, &th, &scenario, &mut OracleHelp::default(), None).unwrap();
        let (actions, outcome) = scripted_session(&addr, seed).await;
        assert_eq!(actions, oracle.executed_actions(), "seed {seed}");
        let expected = match oracle.outcome {
            Outcome::Halted if oracle.steps.last().is_some_and(|s| s.prediction_set.len() > 1) => Outcome::Aborted,
            o => o,
        };
        assert_eq!(outcome, expected, "seed {seed}");
        *outcomes.entry(format!("{:?}", oracle.outcome)).or_insert(0) += 1;
    }
    assert!(outcomes.len() >= 2, "want a mix of outcomes, got {outcomes:?}");
}

#[tokio::test]
async fn disconnect_pauses_then_aborts() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_millis(300)).await;
    let id = create(&addr, 8).await.session_id;
    let mut ws = connect(&addr, id).await;
    assert!(matches!(until_blocking(&mut ws).await, ServerEvent::HelpRequest { .. }));
    ws.close(None).await.unwrap();
    drop(ws);
    tokio::time::sleep(Duration::from_millis(100)).await;
    let paused = snapshot(&addr, id).await;
    assert!(paused.paused);
    assert!(!paused.connected);
    assert_eq!(paused.status, SessionStatus::AwaitingHelp);
    tokio::time::sleep(Duration::from_millis(500)).await;
    let done = snapshot(&addr, id).await;
    assert_eq!(done.status, SessionStatus::Finished);
    assert_eq!(done.outcome, Some(Outcome::Aborted));
}

#[tokio::test]
async fn reconnect_resumes_the_pending_request() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_millis(400)).await;
    let id = create(&addr, 9).await.session_id;
    let mut ws = connect(&addr, id).await;
    assert!(matches!(until_blocking(&mut ws).await, ServerEvent::HelpRequest { step: 0, .. }));
    ws.close(None).await.unwrap();
    drop(ws);
    tokio::time::sleep(Duration::from_millis(100)).await;
    let mut ws = connect(&addr, id).await;
    assert!(matches!(next_event(&mut ws).await, ServerEvent::StateUpdate { step: 0, .. }));
    assert!(matches!(next_event(&mut ws).await, ServerEvent::HelpRequest { step: 0, .. }));
    tokio::time::sleep(Duration::from_millis(600)).await;
    let s = snapshot(&addr, id).await;
    assert_eq!(s.status, SessionStatus::AwaitingHelp, "the old timer must not abort a resumed session");
    assert!(s.connected);
}

#[tokio::test]
async fn rest_errors_are_json() {
    let addr = start(Arc::new(FixedModel), 0.1, Duration::from_secs(300)).await;
    let resp = reqwest::get(format!("http://{addr}/sessions/42")).await.unwrap();
    assert_eq!(resp.status(), 404);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "not_found");
    assert_eq!(body["v"], 1);

    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/sessions"))
        .json(&StartSession {
            index: Some(0),
            seed: Some(1),
        })
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 422);

    let id = create(&addr, 3).await.session_id;
    let _first = connect(&addr, id).await;
    let second = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await;
    assert!(second.is_err(), "a second client must be refused");
}

#[tokio::test]
async fn concurrent_sessions_are_independent() {
    let addr = start(Arc::new(NoisyOracle), 0.2, Duration::from_secs(300)).await;
    let runs = futures::future::join_all((200..204).map(|s| {
        let addr = addr.clone();
        async move { scripted_session(&addr, s).await }
    }))
    .await;
    for (seed, run) in (200..204).zip(runs) {
        let sequential = scripted_session(&addr, seed).await;
        assert_eq!(run, sequential, "seed {seed}");
    }
}
