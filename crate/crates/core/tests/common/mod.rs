#![allow(dead_code)]

use agentrl::orchestrator::{warm_start, PromptSource, TaskPool};
use agentrl::policy::{PolicyMeta, PolicyParams};
use agentrl::sandbox::{Task, TaskSuite};
use std::sync::Arc;

pub fn suite(name: &str) -> Vec<Task> {
    let path = format!("{}/fixtures/{name}.json", env!("CARGO_MANIFEST_DIR"));
    let s = TaskSuite::load(path.as_ref()).unwrap();
    s.validate().unwrap();
    s.tasks
}

pub fn big_params() -> PolicyParams {
    PolicyParams::zeros(PolicyMeta {
        features: 8192,
        vocab: 128,
        context_window: 64,
    })
}

pub fn small_params() -> PolicyParams {
    PolicyParams::zeros(PolicyMeta {
        features: 512,
        vocab: 128,
        context_window: 8,
    })
}

/// Reference-solution warm start used by the RL runs.
pub fn warm(params: &PolicyParams, tasks: &[Task], iterations: usize) -> PolicyParams {
    let tasks: Vec<_> = tasks.iter().cloned().map(Arc::new).collect();
    warm_start(params, &tasks, iterations, 60.0).unwrap()
}

pub fn retail_pool() -> TaskPool {
    let mut pool = TaskPool::new();
    pool.insert_episodes("tool", suite("retail"));
    pool.insert_episodes("swe", suite("code"));
    pool
}

pub fn stepwise_sources(params: &PolicyParams) -> Vec<PromptSource> {
    let mut out = Vec::new();
    for t in suite("retail") {
        out.extend(PromptSource::stepwise_from(&Arc::new(t), params).unwrap());
    }
    out
}

/// A labelled candidate whose single agent step carries `lps`.
pub fn synthetic_candidate(outcome: &str, lps: &[f64], correct: bool) -> agentrl::tts::Candidate {
    use agentrl::model::{GenerationAction, RoleTag, Termination, TokenRole};
    let step = agentrl::Step {
        action: agentrl::Action::Generation(GenerationAction {
            tokens: vec![agentrl::Token(65); lps.len()],
            role_tag: RoleTag::Think,
        }),
        observation: None,
        token_logprobs: lps.to_vec(),
        role_mask: vec![TokenRole::AgentResponse; lps.len()],
    };
    agentrl::tts::Candidate {
        trajectory: agentrl::Trajectory::new("p", vec![step], Termination::MaxSteps),
        canonical_outcome: outcome.into(),
        correct: Some(correct),
        topk_probs: vec![],
    }
}

/// Seeded generators for protocol messages and valid trajectories.
pub mod gen {
    use agentrl::model::{
        ErrorKind, GenerationAction, Observation, RoleTag, Termination, TokenRole,
    };
    use agentrl::{Action, Step, Token, ToolCall, Trajectory, Value};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    pub fn random_string(rng: &mut ChaCha8Rng) -> String {
        const POOL: &[char] = &[
            'a', 'Z', '0', ' ', '"', '\\', '\n', '\t', '{', '}', 'é', '中', '😀', '\u{0}', '/',
        ];
        (0..rng.random_range(0..24))
            .map(|_| POOL[rng.random_range(0..POOL.len())])
            .collect()
    }

    pub fn random_real(rng: &mut ChaCha8Rng) -> f64 {
        match rng.random_range(0..4) {
            0 => rng.random_range(-1e300..1e300),
            1 => rng.random_range(-1e-300..1e-300),
            _ => rng.random_range(-1e3..1e3),
        }
    }

    pub fn random_value(rng: &mut ChaCha8Rng, depth: usize) -> Value {
        match rng.random_range(0..if depth > 2 { 4 } else { 6 }) {
            0 => Value::Bool(rng.random_bool(0.5)),
            1 => Value::Int(rng.random()),
            2 => Value::Real(random_real(rng)),
            3 => Value::Str(random_string(rng)),
            4 => Value::List(
                (0..rng.random_range(0..4))
                    .map(|_| random_value(rng, depth + 1))
                    .collect(),
            ),
            _ => Value::Map(
                (0..rng.random_range(0..4))
                    .map(|_| (random_string(rng), random_value(rng, depth + 1)))
                    .collect(),
            ),
        }
    }

    pub fn random_args(rng: &mut ChaCha8Rng) -> BTreeMap<String, Value> {
        (0..rng.random_range(0..4))
            .map(|_| (random_string(rng), random_value(rng, 0)))
            .collect()
    }

    pub fn random_observation(rng: &mut ChaCha8Rng, tool: &str) -> Observation {
        if rng.random_bool(0.7) {
            Observation::ok(tool, random_string(rng))
        } else {
            let kind = [
                ErrorKind::InvalidInput,
                ErrorKind::NotFound,
                ErrorKind::Timeout,
                ErrorKind::Internal,
            ][rng.random_range(0..4)];
            Observation::error(tool, kind, random_string(rng))
        }
    }

    pub fn random_trajectory(rng: &mut ChaCha8Rng) -> Trajectory {
        let n = rng.random_range(0..5);
        let mut steps = Vec::new();
        let answered = n > 0 && rng.random_bool(0.5);
        for i in 0..n {
            let last = i + 1 == n;
            let (action, observation, agent) = if last && answered {
                (
                    Action::Generation(GenerationAction {
                        tokens: vec![agentrl::vocab::ANSWER],
                        role_tag: RoleTag::Answer,
                    }),
                    None,
                    1,
                )
            } else if rng.random_bool(0.6) {
                let name = format!("tool_{}", rng.random_range(0..5));
                let call = ToolCall::new(name.clone(), random_args(rng)).canonical();
                (
                    Action::ToolCall(call),
                    Some(random_observation(rng, &name)),
                    rng.random_range(3..20),
                )
            } else {
                let tokens: Vec<Token> = (0..rng.random_range(1..10))
                    .map(|_| Token(rng.random_range(0..128)))
                    .collect();
                let tag = if rng.random_bool(0.5) {
                    RoleTag::Think
                } else {
                    RoleTag::Summarize
                };
                let len = tokens.len();
                (
                    Action::Generation(GenerationAction {
                        tokens,
                        role_tag: tag,
                    }),
                    None,
                    len,
                )
            };
            let env = observation.as_ref().map_or(0, |o| o.tokens().len());
            let token_logprobs = (0..agent + env)
                .map(|_| -rng.random_range(0.0..20.0))
                .collect();
            let role_mask = std::iter::repeat_n(TokenRole::AgentResponse, agent)
                .chain(std::iter::repeat_n(TokenRole::EnvironmentFeedback, env))
                .collect();
            steps.push(Step {
                action,
                observation,
                token_logprobs,
                role_mask,
            });
        }
        let termination = if answered {
            Termination::Completed
        } else {
            [
                Termination::MaxContext,
                Termination::MaxSteps,
                Termination::Timeout,
            ][rng.random_range(0..3)]
        };
        Trajectory::new(format!("prompt-{}", random_string(rng)), steps, termination)
    }
}
