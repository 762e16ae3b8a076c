//! Binary outcome and turn-level rewards, and pass-rate prompt filtering.

use crate::model::{self, Action, Step, Termination, ToolCall, Trajectory};
use crate::registry::ToolRegistry;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Outcome,
    TurnLevel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMode {
    pub kind: RewardKind,
    #[serde(default)]
    pub ground_truth_call: Option<ToolCall>,
}

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("turn-level reward needs a ground-truth call")]
    MissingGroundTruth,
    #[error("invalid pass-rate filter: {0}")]
    InvalidFilter(String),
    #[error("bad step-wise record on line {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RewardMode {
    pub fn outcome() -> Self {
        Self {
            kind: RewardKind::Outcome,
            ground_truth_call: None,
        }
    }

    pub fn turn_level(truth: ToolCall) -> Self {
        Self {
            kind: RewardKind::TurnLevel,
            ground_truth_call: Some(truth),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if self.kind == RewardKind::TurnLevel && self.ground_truth_call.is_none() {
            return Err(RewardError::MissingGroundTruth);
        }
        Ok(())
    }
}

/// 1 iff the trajectory is well formed and the environment verified success.
pub fn outcome_reward(t: &Trajectory, env_verdict: bool, registry: &ToolRegistry) -> f64 {
    if env_verdict && model::format_correct(t, registry) {
        1.0
    } else {
        0.0
    }
}

/// Same tool and deeply equal canonical arguments.
pub fn exact_match(candidate: &ToolCall, truth: &ToolCall) -> bool {
    let (a, b) = (candidate.canonical(), truth.canonical());
    a.tool_name == b.tool_name && a.args == b.args
}

/// 1 iff `action` is a call valid against `registry` that exactly matches `truth`.
pub fn turn_reward(action: &Action, truth: &ToolCall, registry: &ToolRegistry) -> f64 {
    let Some(call) = action.as_call() else {
        return 0.0;
    };
    let mut issues = Vec::new();
    model::call_issues(call, registry, &mut issues);
    if issues.is_empty() && exact_match(call, truth) {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRateFilter {
    pub lo: f64,
    pub hi: f64,
    pub samples: usize,
    /// Whether the lower and upper bounds are exclusive.
    pub bounds_open: (bool, bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop,
}

impl PassRateFilter {
    /// `0 < p < 1`: drop prompts that are always or never solved.
    pub fn open_unit(samples: usize) -> Self {
        Self {
            lo: 0.0,
            hi: 1.0,
            samples,
            bounds_open: (true, true),
        }
    }

    /// `0.25 ≤ p ≤ 0.75`.
    pub fn middle_band(samples: usize) -> Self {
        Self {
            lo: 0.25,
            hi: 0.75,
            samples,
            bounds_open: (false, false),
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(0.0 <= self.lo && self.lo <= self.hi && self.hi <= 1.0) {
            return Err(RewardError::InvalidFilter(format!(
                "need 0 <= lo <= hi <= 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn admits(&self, p: f64) -> bool {
        let above = if self.bounds_open.0 {
            p > self.lo
        } else {
            p >= self.lo
        };
        let below = if self.bounds_open.1 {
            p < self.hi
        } else {
            p <= self.hi
        };
        above && below
    }
}

pub fn pass_rate_filter(success_flags: &[bool], f: &PassRateFilter) -> FilterDecision {
    if success_flags.is_empty() {
        return FilterDecision::Drop;
    }
    let p = success_flags.iter().filter(|s| **s).count() as f64 / success_flags.len() as f64;
    if f.admits(p) {
        FilterDecision::Keep
    } else {
        FilterDecision::Drop
    }
}

/// One step-wise training item: predict the next call given the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseItem {
    pub prompt: String,
    /// Steps preceding the target call; its termination is `max_steps`
    /// because the demonstration is cut there.
    pub context: Trajectory,
    pub ground_truth_call: ToolCall,
}

/// Expands a demonstration into one item per ground-truth tool call.
pub fn expand_stepwise(prompt: &str, demo: &Trajectory) -> Vec<StepwiseItem> {
    let mut out = Vec::new();
    for (i, step) in demo.steps.iter().enumerate() {
        if let Some(call) = step.action.as_call() {
            let context: Vec<Step> = demo.steps[..i].to_vec();
            out.push(StepwiseItem {
                prompt: prompt.to_owned(),
                context: Trajectory::new(
                    format!("{}#{}", demo.prompt_id, out.len()),
                    context,
                    Termination::MaxSteps,
                ),
                ground_truth_call: call.canonical(),
            });
        }
    }
    out
}

pub fn write_stepwise(items: &[StepwiseItem], mut w: impl Write) -> Result<(), RewardError> {
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_stepwise(r: impl BufRead) -> Result<Vec<StepwiseItem>, RewardError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: StepwiseItem =
            serde_json::from_str(&line).map_err(|e| RewardError::BadRecord {
                line: i + 1,
                message: e.to_string(),
            })?;
        out.push(item);
    }
    Ok(out)
}
