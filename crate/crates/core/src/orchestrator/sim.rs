//! Discrete-event driver with a virtual clock. Rollouts and updates are
//! computed for real; only their durations are simulated.

use super::{
    derive_seed, rollout_one, Assembler, LatencyModel, Mode, OrchestratorConfig, OrchestratorError,
    PushOutcome, RolloutJob, RunReport, RunTrace, SampleEnvelope, SnapshotStore, StepBreakdown,
    StepRecord, TaskPool, Trainer, UpdateStats,
};
use crate::policy::PolicyParams;
use crate::sandbox::{InProcessEndpoint, SandboxManager};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;

// Same-instant ordering: completions, then trainer events, then pickups.
const COMPLETION: u8 = 0;
const TRAINER: u8 = 1;
const PICKUP: u8 = 2;

enum Event {
    Pickup(usize),
    Completion(usize, Box<SampleEnvelope>),
    TrainStart,
    Publish,
}

#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<(u64, u8, u64)>>,
    events: HashMap<u64, Event>,
    seq: u64,
}

impl Queue {
    fn schedule(&mut self, t: f64, prio: u8, ev: Event) {
        // Non-negative finite floats order like their bit patterns.
        self.heap.push(Reverse((t.to_bits(), prio, self.seq)));
        self.events.insert(self.seq, ev);
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(f64, Event)> {
        let Reverse((bits, _, seq)) = self.heap.pop()?;
        Some((
            f64::from_bits(bits),
            self.events.remove(&seq).expect("scheduled"),
        ))
    }
}

/// Rollout durations, drawn in dispatch order.
struct Latency {
    dist: Option<LogNormal<f64>>,
    mean: f64,
    rng: ChaCha8Rng,
}

impl Latency {
    fn new(m: LatencyModel, seed: u64) -> Self {
        let dist = (m.mean > 0.0 && m.sigma > 0.0).then(|| {
            LogNormal::new(m.mean.ln() - m.sigma * m.sigma / 2.0, m.sigma).expect("valid lognormal")
        });
        Self {
            dist,
            mean: m.mean,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next(&mut self) -> f64 {
        match &self.dist {
            Some(d) => d.sample(&mut self.rng),
            None => self.mean,
        }
    }
}

struct Pending {
    params: PolicyParams,
    stats: UpdateStats,
    start: f64,
    envelopes: Vec<SampleEnvelope>,
}

/// Runs `cfg.steps` updates on the virtual clock.
pub fn run_simulated(
    cfg: &OrchestratorConfig,
    pool: &TaskPool,
    params: PolicyParams,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<RunReport, OrchestratorError> {
    cfg.validate()?;
    pool.check_cycle(&cfg.task_cycle)?;
    let colocated = cfg.mode == Mode::Colocated;
    let workers = if colocated {
        cfg.rollout_workers + cfg.train_workers
    } else {
        cfg.rollout_workers
    };
    let train_dur = if colocated {
        cfg.train_seconds() * cfg.train_workers as f64 / workers as f64
    } else {
        cfg.train_seconds()
    };
    let store = Arc::new(SnapshotStore::new(params, cfg.staleness_bound + 2));
    let trainer = Trainer::new(cfg.grpo.clone(), store.clone());
    let mut assembler = Assembler::new(cfg);
    let mut endpoint = InProcessEndpoint::new(Arc::new(SandboxManager::new(pool.tasks())));
    let mut latency = Latency::new(cfg.latency, derive_seed(cfg.seed, &[0x1a7e]));
    let limits = super::RolloutLimits {
        timeout: None,
        ..cfg.limits()
    };

    let mut q = Queue::default();
    let mut jobs: VecDeque<RolloutJob> = assembler.top_up(0, pool, &cfg.task_cycle)?.into();
    let mut idle = BTreeSet::new();
    for w in 0..workers {
        q.schedule(0.0, PICKUP, Event::Pickup(w));
    }
    let wake = |idle: &mut BTreeSet<usize>, q: &mut Queue, t: f64| {
        for w in std::mem::take(idle) {
            q.schedule(t, PICKUP, Event::Pickup(w));
        }
    };

    let mut training = false;
    let mut pending: Option<Pending> = None;
    let mut step = 0usize;
    let mut empty_windows = 0usize;
    let (mut prev_publish, mut prev_start) = (0.0f64, 0.0f64);
    let mut worker_last = vec![0.0f64; workers];
    let mut report = RunReport {
        params: PolicyParams::clone(&store.current().params),
        updates: vec![],
        breakdown: vec![],
        trace: RunTrace::default(),
    };

    while step < cfg.steps {
        let Some((t, ev)) = q.pop() else {
            return Err(OrchestratorError::Starvation(format!(
                "event queue drained at step {step}"
            )));
        };
        match ev {
            Event::Pickup(w) => match jobs.pop_front() {
                Some(job) => {
                    let snap = store.current();
                    let mut env = rollout_one(&snap, &job, &mut endpoint, &limits)?;
                    let done = t + latency.next();
                    env.enqueue_timestamp = done;
                    report.trace.rollouts.push((t, done));
                    q.schedule(done, COMPLETION, Event::Completion(w, Box::new(env)));
                }
                None => {
                    idle.insert(w);
                }
            },
            Event::Completion(w, env) => {
                worker_last[w] = t;
                if let PushOutcome::Rejected(job) = assembler.push(*env, store.version()) {
                    jobs.push_back(job);
                    wake(&mut idle, &mut q, t);
                }
                q.schedule(t, PICKUP, Event::Pickup(w));
                if !training && assembler.window_ready() {
                    training = true;
                    q.schedule(t, TRAINER, Event::TrainStart);
                }
            }
            Event::TrainStart => {
                let window = assembler.take_window(store.version());
                jobs.extend(window.requeue.iter().cloned());
                if window.selected.is_empty() {
                    empty_windows += 1;
                    if empty_windows > cfg.max_empty_windows {
                        return Err(OrchestratorError::Starvation(format!(
                            "{empty_windows} consecutive windows"
                        )));
                    }
                    training = false;
                    jobs.extend(assembler.top_up(step, pool, &cfg.task_cycle)?);
                    wake(&mut idle, &mut q, t);
                    continue;
                }
                empty_windows = 0;
                let (params, stats) = trainer.train(step, &window)?;
                report.trace.trainings.push((t, t + train_dur));
                pending = Some(Pending {
                    params,
                    stats,
                    start: t,
                    envelopes: window.envelopes().cloned().collect(),
                });
                q.schedule(t + train_dur, TRAINER, Event::Publish);
                if !colocated {
                    jobs.extend(assembler.top_up(step + 1, pool, &cfg.task_cycle)?);
                    wake(&mut idle, &mut q, t);
                }
            }
            Event::Publish => {
                let p = pending.take().expect("publish follows a train start");
                store.publish(p.params);
                let idle_time = if colocated {
                    worker_last
                        .iter()
                        .map(|l| p.start - l.max(prev_publish))
                        .sum::<f64>()
                        / workers as f64
                } else {
                    p.start - prev_publish
                };
                let rollout_time = if colocated {
                    p.start - prev_publish
                } else {
                    p.start - prev_start
                };
                let dt = t - prev_publish;
                let b = StepBreakdown {
                    step,
                    rollout_time,
                    reward_time: 0.0,
                    train_time: t - p.start,
                    idle_time,
                    throughput: if dt > 0.0 { 1.0 / dt } else { f64::INFINITY },
                    end_time: t,
                };
                let snap = store.current();
                observer(&StepRecord {
                    stats: &p.stats,
                    breakdown: &b,
                    params: &snap.params,
                    envelopes: &p.envelopes,
                });
                report.updates.push(p.stats);
                report.breakdown.push(b);
                step += 1;
                prev_publish = t;
                prev_start = p.start;
                training = false;
                if colocated {
                    jobs.extend(assembler.top_up(step, pool, &cfg.task_cycle)?);
                    wake(&mut idle, &mut q, t);
                } else if assembler.window_ready() {
                    training = true;
                    q.schedule(t, TRAINER, Event::TrainStart);
                }
            }
        }
    }
    report.params = PolicyParams::clone(&store.current().params);
    Ok(report)
}
