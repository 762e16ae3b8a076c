use super::{
    derive_seed, next_task, within_staleness, OrchestratorConfig, OrchestratorError, PromptSource,
    RolloutJob, SampleEnvelope, TaskPool,
};
use crate::grpo::{self, GrpoConfig};
use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

#[derive(Debug, Clone)]
struct OpenGroup {
    prompt_id: String,
    source: Arc<PromptSource>,
    slots: Vec<Option<SampleEnvelope>>,
}

/// A group whose every sample has arrived.
#[derive(Debug, Clone)]
pub struct ResolvedGroup {
    pub group_id: u64,
    pub prompt_id: String,
    pub source: Arc<PromptSource>,
    pub envelopes: Vec<SampleEnvelope>,
    pub advantages: Vec<f64>,
    /// Has an unmasked trajectory with a non-zero advantage.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Window {
    pub selected: Vec<ResolvedGroup>,
    pub discarded: Vec<ResolvedGroup>,
    /// Jobs to regenerate because their envelopes went stale while waiting.
    pub requeue: Vec<RolloutJob>,
}

impl Window {
    pub fn envelopes(&self) -> impl Iterator<Item = &SampleEnvelope> {
        self.selected
            .iter()
            .chain(&self.discarded)
            .flat_map(|g| &g.envelopes)
    }
}

#[derive(Debug)]
pub enum PushOutcome {
    Stored,
    /// The envelope completed its group.
    Resolved,
    /// Too stale on arrival; the job must be regenerated.
    Rejected(RolloutJob),
}

/// Groups samples by prompt and decides when a training window is ready.
///
/// Colocated windows close when every open group has resolved; disaggregated
/// windows close at `M` trainable groups or after `window_prompts` resolved
/// groups. Unselected resolved groups are discarded and unresolved groups
/// carry over.
#[derive(Debug)]
pub struct Assembler {
    grpo: GrpoConfig,
    colocated: bool,
    window_prompts: usize,
    staleness_bound: u64,
    seed: u64,
    open: BTreeMap<u64, OpenGroup>,
    ready: VecDeque<ResolvedGroup>,
    next_group: u64,
}

impl Assembler {
    pub fn new(cfg: &OrchestratorConfig) -> Self {
        Self {
            grpo: cfg.grpo.clone(),
            colocated: cfg.mode == super::Mode::Colocated,
            window_prompts: cfg.window_prompts(),
            staleness_bound: cfg.staleness_bound,
            seed: cfg.seed,
            open: BTreeMap::new(),
            ready: VecDeque::new(),
            next_group: 0,
        }
    }

    pub fn open_groups(&self) -> usize {
        self.open.len()
    }

    pub fn ready_groups(&self) -> usize {
        self.ready.len()
    }

    fn job(
        &self,
        group_id: u64,
        prompt_id: &str,
        source: &Arc<PromptSource>,
        sample_index: usize,
        attempt: u32,
    ) -> RolloutJob {
        RolloutJob {
            group_id,
            prompt_id: prompt_id.to_owned(),
            sample_index,
            attempt,
            seed: derive_seed(self.seed, &[group_id, sample_index as u64, attempt as u64]),
            source: source.clone(),
        }
    }

    /// Opens new groups from the suite scheduled for `step` until
    /// `window_prompts` groups are unresolved, returning their jobs.
    pub fn top_up(
        &mut self,
        step: usize,
        pool: &TaskPool,
        cycle: &[String],
    ) -> Result<Vec<RolloutJob>, OrchestratorError> {
        let suite = pool.get(next_task(cycle, step))?;
        let mut jobs = Vec::new();
        while self.open.len() < self.window_prompts {
            let gid = self.next_group;
            self.next_group += 1;
            let source = suite
                [(derive_seed(self.seed ^ 0x5eed, &[gid]) % suite.len() as u64) as usize]
                .clone();
            let prompt_id = format!("{}@{gid}", source.task().id);
            for i in 0..self.grpo.group_size {
                jobs.push(self.job(gid, &prompt_id, &source, i, 0));
            }
            self.open.insert(
                gid,
                OpenGroup {
                    prompt_id,
                    source,
                    slots: vec![None; self.grpo.group_size],
                },
            );
        }
        Ok(jobs)
    }

    /// Retry for a job whose rollout failed, if attempts remain.
    pub fn retry(&self, job: &RolloutJob, max_attempts: u32) -> Option<RolloutJob> {
        (job.attempt + 1 < max_attempts).then(|| {
            self.job(
                job.group_id,
                &job.prompt_id,
                &job.source,
                job.sample_index,
                job.attempt + 1,
            )
        })
    }

    pub fn push(&mut self, env: SampleEnvelope, current_version: u64) -> PushOutcome {
        let Some(group) = self.open.get_mut(&env.group_id) else {
            return PushOutcome::Stored;
        };
        if !within_staleness(env.snapshot_version, current_version, self.staleness_bound) {
            let (prompt_id, source) = (group.prompt_id.clone(), group.source.clone());
            return PushOutcome::Rejected(self.job(
                env.group_id,
                &prompt_id,
                &source,
                env.sample_index,
                env.attempt + 1,
            ));
        }
        let (gid, idx) = (env.group_id, env.sample_index);
        group.slots[idx] = Some(env);
        if group.slots.iter().any(Option::is_none) {
            return PushOutcome::Stored;
        }
        let g = self.open.remove(&gid).expect("present");
        let envelopes: Vec<SampleEnvelope> =
            g.slots.into_iter().map(|s| s.expect("filled")).collect();
        self.ready
            .push_back(resolve(gid, g.prompt_id, g.source, envelopes, &self.grpo));
        PushOutcome::Resolved
    }

    pub fn trainable_ready(&self) -> usize {
        self.ready.iter().filter(|g| g.trainable).count()
    }

    pub fn window_ready(&self) -> bool {
        if self.ready.is_empty() {
            return false;
        }
        if self.colocated {
            self.open.is_empty()
        } else {
            self.trainable_ready() >= self.grpo.update_prompts
                || self.ready.len() >= self.window_prompts
        }
    }

    /// Closes the window: the first `M` trainable groups in resolution order
    /// are selected, the rest discarded.
    pub fn take_window(&mut self, current_version: u64) -> Window {
        let mut w = Window::default();
        while let Some(g) = self.ready.pop_front() {
            if !g.trainable || w.selected.len() >= self.grpo.update_prompts {
                w.discarded.push(g);
                continue;
            }
            let stale: Vec<usize> = g
                .envelopes
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    !within_staleness(e.snapshot_version, current_version, self.staleness_bound)
                })
                .map(|(i, _)| i)
                .collect();
            if stale.is_empty() {
                w.selected.push(g);
                continue;
            }
            let mut slots: Vec<Option<SampleEnvelope>> =
                g.envelopes.into_iter().map(Some).collect();
            for &i in &stale {
                let old = slots[i].take().expect("present");
                w.requeue
                    .push(self.job(g.group_id, &g.prompt_id, &g.source, i, old.attempt + 1));
            }
            self.open.insert(
                g.group_id,
                OpenGroup {
                    prompt_id: g.prompt_id,
                    source: g.source,
                    slots,
                },
            );
        }
        w
    }
}

fn resolve(
    group_id: u64,
    prompt_id: String,
    source: Arc<PromptSource>,
    envelopes: Vec<SampleEnvelope>,
    cfg: &GrpoConfig,
) -> ResolvedGroup {
    let rewards: Vec<f64> = envelopes.iter().map(|e| e.reward).collect();
    let masked: Vec<bool> = envelopes.iter().map(|e| e.masked).collect();
    let advantages =
        grpo::group_advantages(&rewards, &masked, cfg).unwrap_or_else(|_| vec![0.0; rewards.len()]);
    let trainable = envelopes.iter().zip(&advantages).any(|(e, a)| {
        !e.masked
            && *a != 0.0
            && e.roles.contains(&crate::model::TokenRole::AgentResponse)
    });
    ResolvedGroup {
        group_id,
        prompt_id,
        source,
        envelopes,
        advantages,
        trainable,
    }
}
