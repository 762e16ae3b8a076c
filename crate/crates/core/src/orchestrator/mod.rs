//! Rollout orchestration: generation, batch assembly and training in either
//! a colocated (alternating) or disaggregated (overlapping) schedule.

mod assembler;
mod metrics;
mod rollout;
mod sim;
mod threaded;
mod trainer;

pub use assembler::{Assembler, PushOutcome, ResolvedGroup, Window};
pub use metrics::{
    steady_state_throughput, write_metrics_csv, write_trajectories, write_updates_csv, RunTrace,
    StepBreakdown,
};
pub use rollout::{
    demonstration, evaluate, rollout_one, warm_start, PromptSource, RolloutJob, RolloutLimits,
    SampleEnvelope,
};
pub use sim::run_simulated;
pub use threaded::{run_threaded, EndpointFactory};
pub use trainer::{build_records, Trainer, UpdateStats};

use crate::grpo::{GrpoConfig, GrpoError};
use crate::policy::{ParamsError, PolicyParams, SamplingConfig};
use crate::sandbox::{SandboxError, Task};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("invalid orchestrator config: {0}")]
    Config(String),
    #[error("unknown task suite {0:?}")]
    UnknownSuite(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("starvation: no trainable group assembled after {0}")]
    Starvation(String),
    #[error("rollout worker panicked: {0}")]
    WorkerPanic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Generate a full batch, barrier, then train on all workers.
    Colocated,
    /// Dedicated rollout and trainer workers running concurrently.
    Disaggregated,
}

/// Lognormal rollout latency given by its mean; `mean == 0` is instantaneous.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub mean: f64,
    pub sigma: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            mean: 1.0,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub mode: Mode,
    pub rollout_workers: usize,
    pub train_workers: usize,
    pub oversample_factor: f64,
    pub max_steps_per_traj: usize,
    pub max_context_tokens: usize,
    pub per_traj_timeout_ms: Option<u64>,
    /// Suite names visited one per update, cyclically.
    pub task_cycle: Vec<String>,
    pub latency: LatencyModel,
    /// Simulated seconds per update on `train_workers`; balanced against
    /// rollout throughput when absent.
    pub train_latency: Option<f64>,
    pub staleness_bound: u64,
    pub steps: usize,
    pub seed: u64,
    pub sampling: SamplingConfig,
    pub starvation_timeout_ms: u64,
    /// Consecutive windows without a trainable group before giving up.
    pub max_empty_windows: usize,
    pub max_attempts: u32,
    pub grpo: GrpoConfig,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Disaggregated,
            rollout_workers: 4,
            train_workers: 4,
            oversample_factor: 1.5,
            max_steps_per_traj: 6,
            max_context_tokens: 1024,
            per_traj_timeout_ms: None,
            task_cycle: ["tool", "tool", "tool", "swe"].map(String::from).to_vec(),
            latency: LatencyModel::default(),
            train_latency: None,
            staleness_bound: 1,
            steps: 10,
            seed: 0,
            sampling: SamplingConfig::default(),
            starvation_timeout_ms: 30_000,
            max_empty_windows: 200,
            max_attempts: 3,
            grpo: GrpoConfig::default(),
        }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        self.grpo.validate()?;
        self.sampling
            .validate()
            .map_err(OrchestratorError::Config)?;
        if self.rollout_workers == 0 || self.train_workers == 0 {
            return bad("worker counts must be positive".into());
        }
        if !(self.oversample_factor >= 1.0) {
            return bad(format!(
                "oversample_factor {} is below 1",
                self.oversample_factor
            ));
        }
        let want = self.oversample_factor * self.grpo.update_prompts as f64;
        if want > self.grpo.batch_prompts as f64 + 1e-9 {
            return bad(format!(
                "oversample_factor * update_prompts = {want} exceeds batch_prompts {}",
                self.grpo.batch_prompts
            ));
        }
        if self.task_cycle.is_empty() {
            return bad("task_cycle is empty".into());
        }
        if self.max_steps_per_traj == 0 || self.max_context_tokens == 0 {
            return bad("trajectory limits must be positive".into());
        }
        if !(self.latency.mean >= 0.0 && self.latency.sigma >= 0.0 && self.latency.mean.is_finite())
        {
            return bad(format!("bad latency model {:?}", self.latency));
        }
        if self
            .train_latency
            .is_some_and(|t| !(t >= 0.0 && t.is_finite()))
        {
            return bad("train_latency must be finite and non-negative".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    /// Prompts drawn per window: `min(N, ceil(oversample * M))`.
    pub fn window_prompts(&self) -> usize {
        let m = self.grpo.update_prompts as f64;
        ((self.oversample_factor * m - 1e-9).ceil() as usize)
            .clamp(self.grpo.update_prompts, self.grpo.batch_prompts)
    }

    pub fn limits(&self) -> RolloutLimits {
        RolloutLimits {
            max_steps: self.max_steps_per_traj,
            max_context_tokens: self.max_context_tokens,
            timeout: self.per_traj_timeout_ms.map(Duration::from_millis),
            sampling: self.sampling,
        }
    }

    /// Simulated update time on the dedicated trainer workers.
    pub fn train_seconds(&self) -> f64 {
        self.train_latency.unwrap_or_else(|| {
            (self.window_prompts() * self.grpo.group_size) as f64 * self.latency.mean
                / self.rollout_workers as f64
        })
    }
}

/// Suite visited at `step`.
pub fn next_task(cycle: &[String], step: usize) -> &str {
    &cycle[step % cycle.len()]
}

/// Mixes `parts` into `base` with splitmix64 finalization.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
    parts
        .iter()
        .fold(mix(base.wrapping_add(0x9e3779b97f4a7c15)), |acc, p| {
            mix(acc ^ p.wrapping_add(0x9e3779b97f4a7c15))
        })
}

/// Named collections of prompt sources.
#[derive(Debug, Clone, Default)]
pub struct TaskPool {
    suites: BTreeMap<String, Vec<Arc<PromptSource>>>,
}

impl TaskPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, sources: Vec<PromptSource>) {
        self.suites
            .insert(name.into(), sources.into_iter().map(Arc::new).collect());
    }

    /// Registers each task as a full episode.
    pub fn insert_episodes(
        &mut self,
        name: impl Into<String>,
        tasks: impl IntoIterator<Item = Task>,
    ) {
        let sources = tasks
            .into_iter()
            .map(|t| PromptSource::Episode { task: Arc::new(t) })
            .collect();
        self.insert(name, sources);
    }

    pub fn get(&self, name: &str) -> Result<&[Arc<PromptSource>], OrchestratorError> {
        match self.suites.get(name) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(OrchestratorError::UnknownSuite(name.to_owned())),
        }
    }

    pub fn check_cycle(&self, cycle: &[String]) -> Result<(), OrchestratorError> {
        cycle.iter().try_for_each(|n| self.get(n).map(|_| ()))
    }

    /// Every task that appears in the pool, once each.
    pub fn tasks(&self) -> Vec<Task> {
        let mut seen = BTreeMap::new();
        for s in self.suites.values().flatten() {
            let t = s.task();
            seen.entry(t.id.clone()).or_insert_with(|| (**t).clone());
        }
        seen.into_values().collect()
    }
}

/// Immutable published parameters.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub version: u64,
    pub params: Arc<PolicyParams>,
}

/// Latest snapshot for rollout workers plus recent versions for the trainer.
#[derive(Debug)]
pub struct SnapshotStore {
    current: RwLock<Arc<Snapshot>>,
    retained: Mutex<BTreeMap<u64, Arc<PolicyParams>>>,
    keep: u64,
}

impl SnapshotStore {
    /// `keep` versions behind the current one stay retrievable.
    pub fn new(params: PolicyParams, keep: u64) -> Self {
        let params = Arc::new(params);
        Self {
            current: RwLock::new(Arc::new(Snapshot {
                version: 0,
                params: params.clone(),
            })),
            retained: Mutex::new([(0, params)].into()),
            keep,
        }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.current.read().version
    }

    pub fn get(&self, version: u64) -> Option<Arc<PolicyParams>> {
        self.retained.lock().get(&version).cloned()
    }

    /// Installs `params` as the next version and returns it.
    pub fn publish(&self, params: PolicyParams) -> u64 {
        let params = Arc::new(params);
        let mut cur = self.current.write();
        let version = cur.version + 1;
        {
            let mut r = self.retained.lock();
            r.insert(version, params.clone());
            let floor = version.saturating_sub(self.keep);
            r.retain(|v, _| *v >= floor);
        }
        *cur = Arc::new(Snapshot { version, params });
        version
    }
}

/// Whether an envelope from `envelope_version` may be consumed at `current`.
pub fn within_staleness(envelope_version: u64, current: u64, bound: u64) -> bool {
    current.saturating_sub(envelope_version) <= bound
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub params: PolicyParams,
    pub updates: Vec<UpdateStats>,
    pub breakdown: Vec<StepBreakdown>,
    pub trace: RunTrace,
}

impl RunReport {
    pub fn reward_curve(&self) -> Vec<f64> {
        self.updates.iter().map(|u| u.mean_reward).collect()
    }
}

/// Everything an observer sees after one update.
pub struct StepRecord<'a> {
    pub stats: &'a UpdateStats,
    pub breakdown: &'a StepBreakdown,
    pub params: &'a PolicyParams,
    /// Every envelope resolved in the window, selected or not.
    pub envelopes: &'a [SampleEnvelope],
}
