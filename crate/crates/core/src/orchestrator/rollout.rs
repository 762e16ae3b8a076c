use super::{OrchestratorError, Snapshot};
use crate::model::{
    Action, GenerationAction, Observation, RoleTag, Step, Termination, TokenRole, ToolCall,
    Trajectory,
};
use crate::policy::{self, imitation_step, PolicyParams, SampleError, Sampler, SamplingConfig};
use crate::rewards;
use crate::sandbox::{self, RewardPayload, SandboxEndpoint, SandboxSession, Task};
use crate::vocab::{self, Token};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// What a prompt asks of the policy and how it is rewarded.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptSource {
    /// Full multi-turn episode with the outcome reward.
    Episode { task: Arc<Task> },
    /// One action after a teacher-forced prefix, scored against `truth`.
    Stepwise {
        task: Arc<Task>,
        prefix: Vec<Step>,
        truth: ToolCall,
    },
}

impl PromptSource {
    pub fn task(&self) -> &Arc<Task> {
        match self {
            PromptSource::Episode { task } | PromptSource::Stepwise { task, .. } => task,
        }
    }

    /// Step-wise items end after one action by definition, so that cut is
    /// not a truncation and is never masked.
    pub fn masks_truncation(&self) -> bool {
        matches!(self, PromptSource::Episode { .. })
    }

    /// Builds step-wise sources from each task's reference solution.
    pub fn stepwise_from(
        task: &Arc<Task>,
        params: &PolicyParams,
    ) -> Result<Vec<PromptSource>, OrchestratorError> {
        let demo = demonstration(task, params)?;
        Ok(rewards::expand_stepwise(&task.prompt_text(), &demo)
            .into_iter()
            .map(|item| PromptSource::Stepwise {
                task: task.clone(),
                prefix: item.context.steps,
                truth: item.ground_truth_call,
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct RolloutJob {
    pub group_id: u64,
    pub prompt_id: String,
    pub sample_index: usize,
    pub attempt: u32,
    pub seed: u64,
    pub source: Arc<PromptSource>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutLimits {
    pub max_steps: usize,
    pub max_context_tokens: usize,
    pub timeout: Option<Duration>,
    pub sampling: SamplingConfig,
}

impl Default for RolloutLimits {
    fn default() -> Self {
        Self {
            max_steps: 6,
            max_context_tokens: 1024,
            timeout: None,
            sampling: SamplingConfig::default(),
        }
    }
}

/// A finished rollout with its reward, ready for the assembler.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnvelope {
    pub prompt_id: String,
    pub group_id: u64,
    pub sample_index: usize,
    pub attempt: u32,
    pub trajectory: Trajectory,
    pub reward: f64,
    pub reward_payload: RewardPayload,
    /// Loss-masked because the rollout was truncated.
    pub masked: bool,
    pub snapshot_version: u64,
    pub enqueue_timestamp: f64,
    /// Canonical digest of the final world.
    pub outcome: String,
    /// Wall-clock seconds spent on the final (reward) request.
    pub reward_seconds: f64,
    /// Conditioning tokens preceding the trajectory's own tokens.
    pub context: Vec<Token>,
    pub tokens: Vec<Token>,
    pub roles: Vec<TokenRole>,
    pub top_k: Vec<Vec<f64>>,
}

fn step_with_observation(
    params: &PolicyParams,
    history: &mut Vec<Token>,
    action: Action,
    action_tokens: &[Token],
    logprobs: Vec<f64>,
    observation: Option<Observation>,
    top_k: &mut Vec<Vec<f64>>,
    record_top_k: usize,
) -> Step {
    let mut token_logprobs = logprobs;
    let mut role_mask = vec![TokenRole::AgentResponse; action_tokens.len()];
    history.extend_from_slice(action_tokens);
    if let Some(obs) = &observation {
        let obs_tokens = obs.tokens();
        for &t in &obs_tokens {
            let lp = policy::log_softmax(row(params, history), 1.0);
            token_logprobs.push(lp[t.id()]);
            if record_top_k > 0 {
                top_k.push(top_probs(&lp, record_top_k));
            }
            history.push(t);
        }
        role_mask.extend(std::iter::repeat_n(
            TokenRole::EnvironmentFeedback,
            obs_tokens.len(),
        ));
    }
    Step {
        action,
        observation,
        token_logprobs,
        role_mask,
    }
}

fn row<'p>(params: &'p PolicyParams, history: &[Token]) -> &'p [f64] {
    let m = params.meta();
    params.weights().row(policy::context_bucket(
        history,
        m.context_window,
        m.features,
    ))
}

fn top_probs(logp: &[f64], k: usize) -> Vec<f64> {
    let mut p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    p.sort_by(|a, b| b.total_cmp(a));
    p.truncate(k.min(p.len()));
    p
}

/// Runs one ReAct episode and converts the final reward payload to a reward.
pub fn rollout_one(
    snapshot: &Snapshot,
    job: &RolloutJob,
    endpoint: &mut dyn SandboxEndpoint,
    limits: &RolloutLimits,
) -> Result<SampleEnvelope, OrchestratorError> {
    let started = Instant::now();
    let params = &*snapshot.params;
    let task = job.source.task();
    let sampling = SamplingConfig {
        seed: job.seed,
        ..limits.sampling
    };
    let mut sampler =
        Sampler::new(sampling).map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let sandbox_id = format!("{}/{}/{}", job.prompt_id, job.sample_index, job.attempt);
    let mut session = SandboxSession::open(endpoint, sandbox_id, &task.id)?;

    let mut history = vocab::prompt_tokens(&task.prompt_text());
    let (max_steps, truth) = match &*job.source {
        PromptSource::Episode { .. } => (
            task.step_budget()
                .map_or(limits.max_steps, |b| b.min(limits.max_steps)),
            None,
        ),
        PromptSource::Stepwise { prefix, truth, .. } => {
            for step in prefix {
                if let Some(call) = step.action.as_call() {
                    session.execute(call)?;
                }
                let toks = step.tokens(&task.tools).ok_or_else(|| {
                    OrchestratorError::Config(format!(
                        "prefix of {} does not render",
                        job.prompt_id
                    ))
                })?;
                history.extend(toks);
            }
            (1, Some(truth))
        }
    };
    let context = history.clone();
    let mut steps = Vec::new();
    let mut top_k = Vec::new();
    let k = sampling.record_top_k;

    let termination = loop {
        if steps.len() >= max_steps {
            break Termination::MaxSteps;
        }
        if history.len() >= limits.max_context_tokens {
            break Termination::MaxContext;
        }
        if limits.timeout.is_some_and(|t| started.elapsed() >= t) {
            break Termination::Timeout;
        }
        let (action, tokens, logprobs) = match sampler.sample_step(params, &history, &task.tools) {
            Ok(s) => {
                top_k.extend(s.top_k);
                (s.action, s.tokens, s.logprobs)
            }
            Err(SampleError::DecodeFailure {
                partial, logprobs, ..
            }) => {
                if k > 0 {
                    // Top-k rows of a failed call are rebuilt from the tempered distribution.
                    let mut ctx = history.clone();
                    for &t in &partial {
                        let lp = policy::log_softmax(row(params, &ctx), sampling.temperature);
                        top_k.push(top_probs(&lp, k));
                        ctx.push(t);
                    }
                }
                let a = Action::Generation(GenerationAction {
                    tokens: partial.clone(),
                    role_tag: RoleTag::Think,
                });
                (a, partial, logprobs)
            }
            Err(e @ SampleError::InvalidConfig(_)) => {
                return Err(OrchestratorError::Config(e.to_string()))
            }
        };
        let answered = action.is_answer();
        let observation = match action.as_call() {
            Some(call) => Some(session.execute(call)?),
            None => None,
        };
        steps.push(step_with_observation(
            params,
            &mut history,
            action,
            &tokens,
            logprobs,
            observation,
            &mut top_k,
            k,
        ));
        if answered {
            break Termination::Completed;
        }
    };

    let submitted = Instant::now();
    let (outcome, payload) = session.submit()?;
    let reward_seconds = submitted.elapsed().as_secs_f64();
    let trajectory = Trajectory::new(job.prompt_id.clone(), steps, termination);
    let reward = match truth {
        None => rewards::outcome_reward(&trajectory, payload.task_completed, &task.tools),
        Some(truth) => trajectory
            .steps
            .first()
            .map_or(0.0, |s| rewards::turn_reward(&s.action, truth, &task.tools)),
    };
    let masked = job.source.masks_truncation() && termination.is_truncated();
    let mut tokens = Vec::with_capacity(trajectory.total_tokens);
    let mut roles = Vec::with_capacity(trajectory.total_tokens);
    for s in &trajectory.steps {
        tokens.extend(s.tokens(&task.tools).expect("sampled actions render"));
        roles.extend_from_slice(&s.role_mask);
    }
    Ok(SampleEnvelope {
        prompt_id: job.prompt_id.clone(),
        group_id: job.group_id,
        sample_index: job.sample_index,
        attempt: job.attempt,
        trajectory,
        reward,
        reward_payload: payload,
        masked,
        snapshot_version: snapshot.version,
        enqueue_timestamp: 0.0,
        outcome,
        reward_seconds,
        context,
        tokens,
        roles,
        top_k,
    })
}

/// The reference solution as a completed trajectory, scored under `params`.
pub fn demonstration(task: &Task, params: &PolicyParams) -> Result<Trajectory, OrchestratorError> {
    let mut world = task.initial_world()?;
    let mut history = vocab::prompt_tokens(&task.prompt_text());
    let mut steps = Vec::new();
    let mut scratch = Vec::new();
    let train = SamplingConfig::training();
    for call in &task.solution {
        let toks = task
            .tools
            .serialize_call(call)
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let lps = policy::token_logprobs(params, &history, &toks, &train);
        let (next, obs) = sandbox::execute_checked(&task.tools, &world, call);
        world = next;
        let action = Action::ToolCall(call.canonical());
        steps.push(step_with_observation(
            params,
            &mut history,
            action,
            &toks,
            lps,
            Some(obs),
            &mut scratch,
            0,
        ));
    }
    let answer = [vocab::ANSWER];
    let lps = policy::token_logprobs(params, &history, &answer, &train);
    let action = Action::Generation(GenerationAction {
        tokens: answer.to_vec(),
        role_tag: RoleTag::Answer,
    });
    steps.push(step_with_observation(
        params,
        &mut history,
        action,
        &answer,
        lps,
        None,
        &mut scratch,
        0,
    ));
    Ok(Trajectory::new(
        task.id.clone(),
        steps,
        Termination::Completed,
    ))
}

/// Likelihood ascent on reference solutions: `iterations` steps over the
/// agent tokens of every task's demonstration.
pub fn warm_start(
    params: &PolicyParams,
    tasks: &[Arc<Task>],
    iterations: usize,
    learning_rate: f64,
) -> Result<PolicyParams, OrchestratorError> {
    let mut demos = Vec::new();
    for task in tasks {
        let demo = demonstration(task, params)?;
        let context = vocab::prompt_tokens(&task.prompt_text());
        let mut tokens = Vec::new();
        let mut weights = Vec::new();
        for s in &demo.steps {
            tokens.extend(s.tokens(&task.tools).expect("demonstration renders"));
            weights.extend(s.role_mask.iter().map(|r| {
                if *r == TokenRole::AgentResponse {
                    1.0
                } else {
                    0.0
                }
            }));
        }
        demos.push((context, tokens, weights));
    }
    let mut p = params.clone();
    for _ in 0..iterations {
        p = imitation_step(&p, &demos, learning_rate)?;
    }
    Ok(p)
}

/// Mean reward of `samples` rollouts per source under fixed parameters.
pub fn evaluate(
    params: &Arc<PolicyParams>,
    sources: &[Arc<PromptSource>],
    samples: usize,
    limits: &RolloutLimits,
    seed: u64,
) -> Result<f64, OrchestratorError> {
    let tasks: Vec<Task> = sources.iter().map(|s| (**s.task()).clone()).collect();
    let mut endpoint =
        sandbox::InProcessEndpoint::new(Arc::new(sandbox::SandboxManager::new(tasks)));
    let snapshot = Snapshot {
        version: 0,
        params: params.clone(),
    };
    let (mut total, mut n) = (0.0, 0usize);
    for (i, source) in sources.iter().enumerate() {
        for s in 0..samples {
            let job = RolloutJob {
                group_id: i as u64,
                prompt_id: format!("eval-{i}"),
                sample_index: s,
                attempt: 0,
                seed: super::derive_seed(seed, &[i as u64, s as u64]),
                source: source.clone(),
            };
            total += rollout_one(&snapshot, &job, &mut endpoint, limits)?.reward;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
