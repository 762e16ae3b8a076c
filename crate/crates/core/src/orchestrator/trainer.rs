use super::{OrchestratorError, ResolvedGroup, SampleEnvelope, SnapshotStore, Window};
use crate::grpo::{self, GroupRecords, GrpoConfig, SequenceRecords, TokenRecord};
use crate::model::TokenRole;
use crate::policy::{self, PolicyParams, SamplingConfig};
use serde::Serialize;
use std::sync::Arc;

/// Per-update training statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateStats {
    pub step: usize,
    pub objective: f64,
    /// Mean reward over every trajectory resolved in the window.
    pub mean_reward: f64,
    /// Mean policy entropy at agent tokens of the trained groups.
    pub mean_entropy: f64,
    pub masked_fraction: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub groups: usize,
    #[serde(skip)]
    pub version: u64,
}

/// Token records for the selected groups.
///
/// `logp_train_old` comes from the snapshot each trajectory was sampled
/// with, `logp_infer_old` from the sampler's own record.
pub fn build_records(
    groups: &[ResolvedGroup],
    store: &SnapshotStore,
) -> Result<Vec<GroupRecords>, OrchestratorError> {
    let train = SamplingConfig::training();
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let mut sequences = Vec::with_capacity(g.envelopes.len());
        for (env, adv) in g.envelopes.iter().zip(&g.advantages) {
            let old = store.get(env.snapshot_version).ok_or_else(|| {
                OrchestratorError::Config(format!(
                    "snapshot {} no longer retained",
                    env.snapshot_version
                ))
            })?;
            let train_old = policy::token_logprobs(&old, &env.context, &env.tokens, &train);
            let infer_old = env
                .trajectory
                .steps
                .iter()
                .flat_map(|s| s.token_logprobs.iter().copied());
            let records = train_old
                .into_iter()
                .zip(infer_old)
                .zip(&env.roles)
                .map(|((t, i), role)| TokenRecord {
                    logp_train_old: t,
                    logp_infer_old: i,
                    logp_train_current: t,
                    masked: env.masked || *role == TokenRole::EnvironmentFeedback,
                    advantage: *adv,
                })
                .collect();
            sequences.push(SequenceRecords {
                prompt: env.context.clone(),
                tokens: env.tokens.clone(),
                records,
            });
        }
        out.push(GroupRecords { sequences });
    }
    Ok(out)
}

fn mean_entropy(groups: &[ResolvedGroup], params: &PolicyParams) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for env in groups.iter().flat_map(|g| &g.envelopes) {
        let mut history = env.context.clone();
        for (t, role) in env.tokens.iter().zip(&env.roles) {
            if *role == TokenRole::AgentResponse {
                sum += policy::entropy(params, &history);
                n += 1;
            }
            history.push(*t);
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean<'a>(
    xs: impl Iterator<Item = &'a SampleEnvelope>,
    f: impl Fn(&SampleEnvelope) -> f64,
) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), e| (s + f(e), n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Applies updates and publishes snapshots.
#[derive(Debug)]
pub struct Trainer {
    cfg: GrpoConfig,
    store: Arc<SnapshotStore>,
}

impl Trainer {
    pub fn new(cfg: GrpoConfig, store: Arc<SnapshotStore>) -> Self {
        Self { cfg, store }
    }

    pub fn store(&self) -> &Arc<SnapshotStore> {
        &self.store
    }

    /// One update on the window's selected groups. The new parameters are
    /// returned, not published.
    pub fn train(
        &self,
        step: usize,
        window: &Window,
    ) -> Result<(PolicyParams, UpdateStats), OrchestratorError> {
        let snap = self.store.current();
        let records = build_records(&window.selected, &self.store)?;
        let entropy = mean_entropy(&window.selected, &snap.params);
        let outcome = grpo::update(&records, &self.cfg, &snap.params)?;
        let stats = UpdateStats {
            step,
            objective: outcome.objective,
            mean_reward: mean(window.envelopes(), |e| e.reward),
            mean_entropy: entropy,
            masked_fraction: mean(window.envelopes(), |e| f64::from(u8::from(e.masked))),
            grad_norm: outcome.grad_norm,
            groups: window.selected.len(),
            version: snap.version + 1,
        };
        Ok((outcome.params, stats))
    }
}
