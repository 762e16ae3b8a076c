//! Trajectory data model shared by every subsystem.
//!
//! A trajectory is the ReAct sequence of assistant actions (free text or a
//! tool call) with the environment observation that follows each call, plus
//! the per-token log-probabilities recorded while it was generated. Values
//! are plain data: build them, validate them, share them.

use crate::registry::ToolRegistry;
use crate::value::Value;
use crate::vocab::{self, Token};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Think,
    Answer,
    Summarize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationAction {
    pub tokens: Vec<Token>,
    pub role_tag: RoleTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub args: BTreeMap<String, Value>,
}

impl ToolCall {
    /// Builds a call with canonicalized argument values.
    pub fn new(tool_name: impl Into<String>, args: BTreeMap<String, Value>) -> Self {
        let args = args.into_iter().map(|(k, v)| (k, v.canonical())).collect();
        Self {
            tool_name: tool_name.into(),
            args,
        }
    }

    pub fn with_args<K: Into<String>>(
        tool_name: impl Into<String>,
        args: impl IntoIterator<Item = (K, Value)>,
    ) -> Self {
        Self::new(
            tool_name,
            args.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        )
    }

    pub fn canonical(&self) -> ToolCall {
        Self::new(self.tool_name.clone(), self.args.clone())
    }

    pub fn arg_str(&self, name: &str) -> Option<&str> {
        self.args.get(name).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsStatus {
    Ok,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    InvalidInput,
    NotFound,
    Timeout,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub source_tool: String,
    pub status: ObsStatus,
    pub payload: String,
    #[serde(default)]
    pub error_kind: Option<ErrorKind>,
}

impl Observation {
    pub fn ok(source_tool: impl Into<String>, payload: impl Into<String>) -> Self {
        Self {
            source_tool: source_tool.into(),
            status: ObsStatus::Ok,
            payload: payload.into(),
            error_kind: None,
        }
    }

    pub fn error(
        source_tool: impl Into<String>,
        kind: ErrorKind,
        payload: impl Into<String>,
    ) -> Self {
        Self {
            source_tool: source_tool.into(),
            status: ObsStatus::Error,
            payload: payload.into(),
            error_kind: Some(kind),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ObsStatus::Ok
    }

    /// Token rendering: status sentinel, clipped payload, `END_OBS`.
    pub fn tokens(&self) -> Vec<Token> {
        let mut out = Vec::with_capacity(self.payload.len().min(vocab::OBS_PAYLOAD_CAP) + 2);
        out.push(if self.is_ok() {
            vocab::OBS_OK
        } else {
            vocab::OBS_ERR
        });
        let payload = vocab::text_tokens(&self.payload);
        out.extend(payload.into_iter().take(vocab::OBS_PAYLOAD_CAP));
        out.push(vocab::END_OBS);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Generation(GenerationAction),
    ToolCall(ToolCall),
}

impl Action {
    pub fn is_answer(&self) -> bool {
        matches!(self, Action::Generation(g) if g.role_tag == RoleTag::Answer)
    }

    pub fn as_call(&self) -> Option<&ToolCall> {
        match self {
            Action::ToolCall(c) => Some(c),
            Action::Generation(_) => None,
        }
    }

    /// Token rendering of the action; tool calls need their registry.
    pub fn tokens(&self, registry: &ToolRegistry) -> Option<Vec<Token>> {
        match self {
            Action::Generation(g) => Some(g.tokens.clone()),
            Action::ToolCall(c) => registry.serialize_call(c).ok(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    AgentResponse,
    EnvironmentFeedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub action: Action,
    #[serde(default)]
    pub observation: Option<Observation>,
    pub token_logprobs: Vec<f64>,
    pub role_mask: Vec<TokenRole>,
}

impl Step {
    pub fn token_count(&self) -> usize {
        self.role_mask.len()
    }

    pub fn agent_token_count(&self) -> usize {
        self.role_mask
            .iter()
            .take_while(|r| **r == TokenRole::AgentResponse)
            .count()
    }

    /// Every token of the step: action tokens then observation tokens.
    pub fn tokens(&self, registry: &ToolRegistry) -> Option<Vec<Token>> {
        let mut out = self.action.tokens(registry)?;
        if let Some(obs) = &self.observation {
            out.extend(obs.tokens());
        }
        Some(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    MaxContext,
    MaxSteps,
    Timeout,
}

impl Termination {
    pub fn is_truncated(self) -> bool {
        self != Termination::Completed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt_id: String,
    pub steps: Vec<Step>,
    pub termination: Termination,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
}

impl Trajectory {
    /// Assembles a trajectory, deriving `total_tokens` from the steps.
    pub fn new(prompt_id: impl Into<String>, steps: Vec<Step>, termination: Termination) -> Self {
        let total_tokens = steps.iter().map(Step::token_count).sum();
        Self {
            prompt_id: prompt_id.into(),
            steps,
            termination,
            total_tokens,
        }
    }

    pub fn final_action(&self) -> Option<&Action> {
        self.steps.last().map(|s| &s.action)
    }

    pub fn tool_calls(&self) -> impl Iterator<Item = &ToolCall> {
        self.steps.iter().filter_map(|s| s.action.as_call())
    }

    /// All per-token log-probabilities with their roles, in order.
    pub fn token_records(&self) -> impl Iterator<Item = (f64, TokenRole)> + '_ {
        self.steps.iter().flat_map(|s| {
            s.token_logprobs
                .iter()
                .copied()
                .zip(s.role_mask.iter().copied())
        })
    }

    /// Checks every invariant that does not need the tool registry.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::SchemaViolation(msg));
        if self.prompt_id.is_empty() {
            return bad("prompt_id is empty".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            validate_step(step)
                .map_err(|m| ModelError::SchemaViolation(format!("step {i}: {m}")))?;
            if step.action.is_answer() && i + 1 != self.steps.len() {
                return bad(format!("step {i}: answer action is not the final step"));
            }
        }
        let sum: usize = self.steps.iter().map(Step::token_count).sum();
        if sum != self.total_tokens {
            return bad(format!(
                "total_tokens {} differs from step token sum {sum}",
                self.total_tokens
            ));
        }
        let ends_in_answer = self.final_action().is_some_and(Action::is_answer);
        if (self.termination == Termination::Completed) != ends_in_answer {
            return bad(format!(
                "termination {:?} inconsistent with final action",
                self.termination
            ));
        }
        Ok(())
    }

    /// [`validate`](Self::validate) plus the tool-call token counts.
    pub fn validate_with(&self, registry: &ToolRegistry) -> Result<(), ModelError> {
        self.validate()?;
        for (i, step) in self.steps.iter().enumerate() {
            if let Action::ToolCall(call) = &step.action {
                if let Ok(toks) = registry.serialize_call(call) {
                    if toks.len() != step.agent_token_count() {
                        return Err(ModelError::SchemaViolation(format!(
                            "step {i}: {} agent tokens recorded, call renders to {}",
                            step.agent_token_count(),
                            toks.len()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn validate_step(step: &Step) -> Result<(), String> {
    match (&step.action, &step.observation) {
        (Action::ToolCall(_), None) => return Err("tool call without observation".into()),
        (Action::Generation(_), Some(_)) => return Err("observation on a generation action".into()),
        _ => {}
    }
    match &step.action {
        Action::Generation(g) if g.tokens.is_empty() => {
            return Err("empty generation action".into())
        }
        Action::ToolCall(c) if c.tool_name.is_empty() => return Err("empty tool name".into()),
        Action::ToolCall(c) if c.args.values().any(|v| !v.is_canonical() || !v.is_finite()) => {
            return Err("non-canonical argument value".into())
        }
        _ => {}
    }
    if let Some(obs) = &step.observation {
        if (obs.status == ObsStatus::Error) != obs.error_kind.is_some() {
            return Err("error_kind must be present iff status is error".into());
        }
    }
    if step.token_logprobs.len() != step.role_mask.len() {
        return Err(format!(
            "{} log-probabilities for {} role tags",
            step.token_logprobs.len(),
            step.role_mask.len()
        ));
    }
    if step
        .token_logprobs
        .iter()
        .any(|lp| !lp.is_finite() || *lp > 0.0)
    {
        return Err("log-probabilities must be finite and non-positive".into());
    }
    let agent = step.agent_token_count();
    if step.role_mask[agent..]
        .iter()
        .any(|r| *r != TokenRole::EnvironmentFeedback)
    {
        return Err("agent tokens must precede environment tokens".into());
    }
    let env = step.role_mask.len() - agent;
    let expected_env = step.observation.as_ref().map_or(0, |o| o.tokens().len());
    if env != expected_env {
        return Err(format!(
            "{env} environment tokens, observation renders to {expected_env}"
        ));
    }
    if let Action::Generation(g) = &step.action {
        if agent != g.tokens.len() {
            return Err(format!(
                "{agent} agent tokens for a {}-token action",
                g.tokens.len()
            ));
        }
    }
    Ok(())
}

/// One JSON line, no embedded newlines.
pub fn serialize_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory values always serialize")
}

pub fn parse_trajectory(record: &str) -> Result<Trajectory, ModelError> {
    let raw: serde_json::Value =
        serde_json::from_str(record).map_err(|e| ModelError::MalformedRecord(e.to_string()))?;
    let t: Trajectory =
        serde_json::from_value(raw).map_err(|e| ModelError::SchemaViolation(e.to_string()))?;
    t.validate()?;
    Ok(t)
}

/// Reasons a trajectory fails the format predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatIssue {
    NotAlternating,
    UnknownTool,
    MissingArgument,
    ArgumentType,
    UnknownArgument,
    NotCompleted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatVerdict {
    pub reasons: Vec<FormatIssue>,
}

impl FormatVerdict {
    pub fn is_correct(&self) -> bool {
        self.reasons.is_empty()
    }
}

/// Checks one call against its signature, appending any issues.
pub fn call_issues(call: &ToolCall, registry: &ToolRegistry, out: &mut Vec<FormatIssue>) {
    let Some(spec) = registry.get(&call.tool_name) else {
        out.push(FormatIssue::UnknownTool);
        return;
    };
    for p in &spec.params {
        match call.args.get(&p.name) {
            None if p.required => out.push(FormatIssue::MissingArgument),
            Some(v) if !p.admits(v) => out.push(FormatIssue::ArgumentType),
            _ => {}
        }
    }
    if call.args.keys().any(|k| spec.param_spec(k).is_none()) {
        out.push(FormatIssue::UnknownArgument);
    }
}

/// Format predicate of the outcome reward, with reason codes.
pub fn format_verdict(t: &Trajectory, registry: &ToolRegistry) -> FormatVerdict {
    let mut reasons = Vec::new();
    if t.validate().is_err() {
        reasons.push(FormatIssue::NotAlternating);
    }
    for call in t.tool_calls() {
        call_issues(call, registry, &mut reasons);
    }
    if t.termination != Termination::Completed {
        reasons.push(FormatIssue::NotCompleted);
    }
    let mut seen = std::collections::HashSet::new();
    reasons.retain(|r| seen.insert(*r));
    FormatVerdict { reasons }
}

pub fn format_correct(t: &Trajectory, registry: &ToolRegistry) -> bool {
    format_verdict(t, registry).is_correct()
}

/// The G trajectories sampled for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        prompt_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let prompt_id = prompt_id.into();
        if trajectories.len() != rewards.len() {
            return Err(ModelError::SchemaViolation(format!(
                "{} trajectories but {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        if let Some(t) = trajectories.iter().find(|t| t.prompt_id != prompt_id) {
            return Err(ModelError::SchemaViolation(format!(
                "trajectory for {:?} in group {prompt_id:?}",
                t.prompt_id
            )));
        }
        let advantages = vec![0.0; rewards.len()];
        Ok(Self {
            prompt_id,
            trajectories,
            rewards,
            advantages,
        })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}
