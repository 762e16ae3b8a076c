use super::{SampleEnvelope, UpdateStats};
use crate::io::write_atomic;
use crate::model::serialize_trajectory;
use serde::Serialize;
use std::path::Path;

/// Timing of one update, in seconds (virtual in simulation).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepBreakdown {
    pub step: usize,
    pub rollout_time: f64,
    pub reward_time: f64,
    pub train_time: f64,
    pub idle_time: f64,
    /// Updates per second over this step.
    pub throughput: f64,
    /// When the update was published.
    #[serde(skip)]
    pub end_time: f64,
}

/// Activity intervals of a run, for checking overlap.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub rollouts: Vec<(f64, f64)>,
    pub trainings: Vec<(f64, f64)>,
}

impl RunTrace {
    /// True if some update and some rollout were in progress at the same instant.
    pub fn has_overlap(&self) -> bool {
        self.trainings
            .iter()
            .any(|&(s, e)| self.rollouts.iter().any(|&(a, b)| s.max(a) < e.min(b)))
    }
}

/// Updates per second after skipping the first `warmup` fraction of steps.
pub fn steady_state_throughput(steps: &[StepBreakdown], warmup: f64) -> Option<f64> {
    let skip = ((steps.len() as f64 * warmup).ceil() as usize).max(1);
    if steps.len() <= skip {
        return None;
    }
    let span = steps[steps.len() - 1].end_time - steps[skip - 1].end_time;
    (span > 0.0).then(|| (steps.len() - skip) as f64 / span)
}

fn csv_bytes<T: Serialize>(rows: impl IntoIterator<Item = T>) -> std::io::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))
}

#[derive(Serialize)]
struct MetricsRow {
    step: usize,
    rollout_time: f64,
    reward_time: f64,
    train_time: f64,
    idle_time: f64,
    throughput: f64,
    mean_reward: f64,
    entropy: f64,
}

/// `step,rollout_time,reward_time,train_time,idle_time,throughput,mean_reward,entropy`
pub fn write_metrics_csv(
    path: &Path,
    steps: &[StepBreakdown],
    updates: &[UpdateStats],
) -> std::io::Result<()> {
    let rows = steps.iter().zip(updates).map(|(b, u)| MetricsRow {
        step: b.step,
        rollout_time: b.rollout_time,
        reward_time: b.reward_time,
        train_time: b.train_time,
        idle_time: b.idle_time,
        throughput: b.throughput,
        mean_reward: u.mean_reward,
        entropy: u.mean_entropy,
    });
    write_atomic(path, &csv_bytes(rows)?)
}

/// `step,objective,mean_reward,mean_entropy,masked_fraction,grad_norm`
pub fn write_updates_csv(path: &Path, updates: &[UpdateStats]) -> std::io::Result<()> {
    write_atomic(path, &csv_bytes(updates)?)
}

/// One trajectory record per line.
pub fn write_trajectories<'a>(
    path: &Path,
    envelopes: impl IntoIterator<Item = &'a SampleEnvelope>,
) -> std::io::Result<()> {
    let mut out = String::new();
    for e in envelopes {
        out.push_str(&serialize_trajectory(&e.trajectory));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}
