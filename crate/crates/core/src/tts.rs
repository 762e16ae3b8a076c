//! Test-time selection over pools of candidate trajectories.

use crate::model::{serialize_trajectory, TokenRole, Trajectory};
use crate::orchestrator::SampleEnvelope;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TtsError {
    #[error("no token passes the role filter")]
    EmptySelection,
    #[error("pool has no candidates")]
    EmptyPool,
    #[error("candidate {0} has no canonical outcome")]
    MissingOutcome(usize),
    #[error("candidate {0} has no correctness label")]
    MissingLabel(usize),
    #[error("pool has {have} candidates, {need} required")]
    InsufficientCandidates { need: usize, have: usize },
    #[error("top-k row {row} has {have} entries, {need} required")]
    InsufficientTopK {
        row: usize,
        need: usize,
        have: usize,
    },
    #[error("malformed candidate: {0}")]
    Malformed(String),
    #[error("judge failed in round {round}, group {group}: {source}")]
    JudgeFailure {
        round: usize,
        group: usize,
        source: Box<TtsError>,
    },
    #[error("judge endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("malformed judge reply: {0}")]
    MalformedReply(String),
    #[error("winner index {index} out of range for {len} candidates")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("unknown strategy '{0}'")]
    UnknownStrategy(String),
    #[error("invalid selection config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trajectory: Trajectory,
    pub canonical_outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    /// Largest next-token probabilities per token, in trajectory token order.
    #[serde(default)]
    pub topk_probs: Vec<Vec<f64>>,
}

impl Candidate {
    pub fn from_envelope(env: &SampleEnvelope, correct: Option<bool>) -> Self {
        Self {
            trajectory: env.trajectory.clone(),
            canonical_outcome: env.outcome.clone(),
            correct,
            topk_probs: env.top_k.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), TtsError> {
        self.trajectory
            .validate()
            .map_err(|e| TtsError::Malformed(e.to_string()))?;
        if let Some(first) = self.topk_probs.first() {
            if self.topk_probs.len() != self.trajectory.total_tokens {
                return Err(TtsError::Malformed(format!(
                    "{} top-k rows for {} tokens",
                    self.topk_probs.len(),
                    self.trajectory.total_tokens
                )));
            }
            for row in &self.topk_probs {
                if row.len() != first.len() {
                    return Err(TtsError::Malformed("top-k rows differ in length".into()));
                }
                if row.windows(2).any(|w| w[0] < w[1]) {
                    return Err(TtsError::Malformed(
                        "top-k row not sorted descending".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub prompt_id: String,
    pub candidates: Vec<Candidate>,
    pub k: usize,
}

impl CandidatePool {
    /// `k` is capped at the vocabulary size.
    pub fn new(
        prompt_id: impl Into<String>,
        candidates: Vec<Candidate>,
        k: usize,
        vocab: usize,
    ) -> Result<Self, TtsError> {
        if candidates.is_empty() {
            return Err(TtsError::EmptyPool);
        }
        Ok(Self {
            prompt_id: prompt_id.into(),
            candidates,
            k: k.min(vocab).max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoleFilter {
    AgentResponse,
    EnvironmentFeedback,
    #[default]
    All,
}

impl RoleFilter {
    fn admits(self, role: TokenRole) -> bool {
        match self {
            RoleFilter::All => true,
            RoleFilter::AgentResponse => role == TokenRole::AgentResponse,
            RoleFilter::EnvironmentFeedback => role == TokenRole::EnvironmentFeedback,
        }
    }
}

impl FromStr for RoleFilter {
    type Err = TtsError;
    fn from_str(s: &str) -> Result<Self, TtsError> {
        match s {
            "agent_response" => Ok(Self::AgentResponse),
            "environment_feedback" => Ok(Self::EnvironmentFeedback),
            "all" => Ok(Self::All),
            _ => Err(TtsError::InvalidConfig(format!(
                "unknown role filter '{s}'"
            ))),
        }
    }
}

/// Mean log-probability over the tokens admitted by `filter`.
pub fn avg_logprob(c: &Candidate, filter: RoleFilter) -> Result<f64, TtsError> {
    let lps: Vec<f64> = c
        .trajectory
        .token_records()
        .filter(|(_, r)| filter.admits(*r))
        .map(|(l, _)| l)
        .collect();
    if lps.is_empty() {
        return Err(TtsError::EmptySelection);
    }
    Ok(lps.iter().sum::<f64>() / lps.len() as f64)
}

/// `C_i = −(1/k) Σ_j log P_i(j)`, averaged over the admitted tokens.
pub fn trace_confidence(c: &Candidate, k: usize, filter: RoleFilter) -> Result<f64, TtsError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (row, (_, role)) in c.trajectory.token_records().enumerate() {
        if !filter.admits(role) {
            continue;
        }
        let probs = c.topk_probs.get(row).ok_or(TtsError::InsufficientTopK {
            row,
            need: k,
            have: 0,
        })?;
        if probs.len() < k {
            return Err(TtsError::InsufficientTopK {
                row,
                need: k,
                have: probs.len(),
            });
        }
        total += -probs[..k].iter().map(|p| p.ln()).sum::<f64>() / k as f64;
        n += 1;
    }
    if n == 0 {
        return Err(TtsError::EmptySelection);
    }
    Ok(total / n as f64)
}

/// Index of the best score; `None` scores rank last, ties go to the lowest index.
fn argmax(scores: &[Option<f64>]) -> Result<usize, TtsError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i).ok_or(TtsError::EmptySelection)
}

fn optional(r: Result<f64, TtsError>) -> Result<Option<f64>, TtsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(TtsError::EmptySelection) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Most frequent outcome; ties by higher mean log-probability, then lower index.
pub fn majority_vote(pool: &CandidatePool) -> Result<usize, TtsError> {
    if pool.is_empty() {
        return Err(TtsError::EmptyPool);
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, c) in pool.candidates.iter().enumerate() {
        if c.canonical_outcome.is_empty() {
            return Err(TtsError::MissingOutcome(i));
        }
        *counts.entry(&c.canonical_outcome).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    let scores = pool
        .candidates
        .iter()
        .map(|c| {
            if counts[c.canonical_outcome.as_str()] < top {
                return Ok(None);
            }
            Ok(Some(
                optional(avg_logprob(c, RoleFilter::All))?.unwrap_or(f64::NEG_INFINITY),
            ))
        })
        .collect::<Result<Vec<_>, TtsError>>()?;
    argmax(&scores)
}

/// Picks one member of `group` (given as pool indices); returns a position in `group`.
pub trait Judge {
    fn judge(&self, pool: &CandidatePool, group: &[usize]) -> Result<usize, TtsError>;
}

impl<F: Fn(&CandidatePool, &[usize]) -> Result<usize, TtsError>> Judge for F {
    fn judge(&self, pool: &CandidatePool, group: &[usize]) -> Result<usize, TtsError> {
        self(pool, group)
    }
}

/// Prefers a candidate labelled correct, else the first.
pub struct OracleJudge;

impl Judge for OracleJudge {
    fn judge(&self, pool: &CandidatePool, group: &[usize]) -> Result<usize, TtsError> {
        Ok(group
            .iter()
            .position(|&i| pool.candidates[i].correct == Some(true))
            .unwrap_or(0))
    }
}

/// Groupwise tournament; the last group may be short and singletons advance unjudged.
pub fn knockout_select(
    pool: &CandidatePool,
    judge: &dyn Judge,
    group_size: usize,
) -> Result<usize, TtsError> {
    if pool.is_empty() {
        return Err(TtsError::EmptyPool);
    }
    if group_size < 2 {
        return Err(TtsError::InvalidConfig(format!(
            "group_size {group_size} < 2"
        )));
    }
    let mut alive: Vec<usize> = (0..pool.len()).collect();
    let mut round = 0;
    while alive.len() > 1 {
        let mut next = Vec::with_capacity(alive.len().div_ceil(group_size));
        for (g, group) in alive.chunks(group_size).enumerate() {
            if group.len() == 1 {
                next.push(group[0]);
                continue;
            }
            let wrap = |e| TtsError::JudgeFailure {
                round,
                group: g,
                source: Box::new(e),
            };
            let w = judge.judge(pool, group).map_err(wrap)?;
            if w >= group.len() {
                return Err(wrap(TtsError::IndexOutOfRange {
                    index: w,
                    len: group.len(),
                }));
            }
            next.push(group[w]);
        }
        alive = next;
        round += 1;
    }
    Ok(alive[0])
}

/// Fraction of pools whose first `n` candidates contain a correct one.
pub fn pass_at_n(pools: &[CandidatePool], n: usize) -> Result<f64, TtsError> {
    if pools.is_empty() {
        return Err(TtsError::EmptyPool);
    }
    let mut hits = 0usize;
    for pool in pools {
        if pool.len() < n {
            return Err(TtsError::InsufficientCandidates {
                need: n,
                have: pool.len(),
            });
        }
        let mut any = false;
        for (i, c) in pool.candidates[..n].iter().enumerate() {
            any |= c.correct.ok_or(TtsError::MissingLabel(i))?;
        }
        hits += usize::from(any);
    }
    Ok(hits as f64 / pools.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Majority,
    Logprob,
    Confidence,
    Knockout,
}

impl FromStr for Strategy {
    type Err = TtsError;
    fn from_str(s: &str) -> Result<Self, TtsError> {
        match s {
            "majority" => Ok(Self::Majority),
            "logprob" => Ok(Self::Logprob),
            "confidence" => Ok(Self::Confidence),
            "knockout" => Ok(Self::Knockout),
            _ => Err(TtsError::UnknownStrategy(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectConfig {
    pub role_filter: RoleFilter,
    /// Select the lowest trace confidence instead of the highest.
    pub invert_confidence: bool,
    pub group_size: usize,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            role_filter: RoleFilter::All,
            invert_confidence: false,
            group_size: 2,
        }
    }
}

/// Per-candidate score under a score-based strategy; `None` where no token passes the filter.
pub fn scores(
    pool: &CandidatePool,
    strategy: Strategy,
    cfg: &SelectConfig,
) -> Result<Vec<Option<f64>>, TtsError> {
    pool.candidates
        .iter()
        .map(|c| match strategy {
            Strategy::Logprob => optional(avg_logprob(c, cfg.role_filter)),
            Strategy::Confidence => {
                let v = optional(trace_confidence(c, pool.k, cfg.role_filter))?;
                Ok(v.map(|v| if cfg.invert_confidence { -v } else { v }))
            }
            Strategy::Majority | Strategy::Knockout => optional(avg_logprob(c, RoleFilter::All)),
        })
        .collect()
}

pub fn select(
    pool: &CandidatePool,
    strategy: Strategy,
    cfg: &SelectConfig,
    judge: &dyn Judge,
) -> Result<usize, TtsError> {
    match strategy {
        Strategy::Majority => majority_vote(pool),
        Strategy::Knockout => knockout_select(pool, judge, cfg.group_size),
        Strategy::Logprob | Strategy::Confidence => argmax(&scores(pool, strategy, cfg)?),
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: &'a str,
    candidates: Vec<String>,
}

#[derive(Deserialize)]
struct JudgeReply {
    winner: usize,
}

/// Remote judge speaking JSON over HTTP POST.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    pub endpoint: String,
    pub prompt: String,
    pub timeout: Duration,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, prompt: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            prompt: prompt.into(),
            timeout,
        }
    }
}

/// One round-trip: sends the rendered group and validates the returned index.
pub fn judge_client(judge: &HttpJudge, group: &[&Candidate]) -> Result<usize, TtsError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(judge.timeout))
        .build()
        .into();
    let body = JudgeRequest {
        prompt: &judge.prompt,
        candidates: group
            .iter()
            .map(|c| serialize_trajectory(&c.trajectory))
            .collect(),
    };
    let mut resp = agent
        .post(&judge.endpoint)
        .send_json(&body)
        .map_err(|e| match e {
            ureq::Error::StatusCode(code) => {
                TtsError::MalformedReply(format!("HTTP status {code}"))
            }
            e => TtsError::EndpointUnreachable(e.to_string()),
        })?;
    let reply: JudgeReply = resp.body_mut().read_json().map_err(|e| match e {
        ureq::Error::Json(e) => TtsError::MalformedReply(e.to_string()),
        ureq::Error::Io(e) if e.kind() != std::io::ErrorKind::InvalidData => {
            TtsError::EndpointUnreachable(e.to_string())
        }
        e => TtsError::MalformedReply(e.to_string()),
    })?;
    if reply.winner >= group.len() {
        return Err(TtsError::IndexOutOfRange {
            index: reply.winner,
            len: group.len(),
        });
    }
    Ok(reply.winner)
}

impl Judge for HttpJudge {
    fn judge(&self, pool: &CandidatePool, group: &[usize]) -> Result<usize, TtsError> {
        let members: Vec<&Candidate> = group.iter().map(|&i| &pool.candidates[i]).collect();
        judge_client(self, &members)
    }
}

/// Writes one candidate per line.
pub fn write_pool(path: &Path, pool: &CandidatePool) -> Result<(), TtsError> {
    let mut out = String::new();
    for c in &pool.candidates {
        out.push_str(&serde_json::to_string(c).map_err(|e| TtsError::Malformed(e.to_string()))?);
        out.push('\n');
    }
    crate::io::write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_pool(path: &Path, k: usize, vocab: usize) -> Result<CandidatePool, TtsError> {
    let file = std::fs::File::open(path)?;
    let mut candidates = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Candidate = serde_json::from_str(&line)
            .map_err(|e| TtsError::Malformed(format!("line {}: {e}", n + 1)))?;
        c.validate()?;
        candidates.push(c);
    }
    let prompt_id = candidates
        .first()
        .map(|c| c.trajectory.prompt_id.clone())
        .unwrap_or_default();
    CandidatePool::new(prompt_id, candidates, k, vocab)
}
