//! Wall-clock driver: rollout worker threads feeding a trainer on the
//! calling thread.

use super::{
    rollout_one, Assembler, Mode, OrchestratorConfig, OrchestratorError, PushOutcome, RolloutJob,
    RunReport, RunTrace, SampleEnvelope, SnapshotStore, StepBreakdown, StepRecord, TaskPool,
    Trainer,
};
use crate::policy::PolicyParams;
use crate::sandbox::{SandboxEndpoint, SandboxError};
use crossbeam_channel::{unbounded, RecvTimeoutError, Sender};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Opens one sandbox connection per rollout worker.
pub type EndpointFactory =
    Arc<dyn Fn() -> Result<Box<dyn SandboxEndpoint>, SandboxError> + Send + Sync>;

enum Msg {
    Done {
        worker: usize,
        env: Box<SampleEnvelope>,
        start: f64,
        end: f64,
    },
    Failed {
        job: Box<RolloutJob>,
        error: OrchestratorError,
    },
    Panicked(String),
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "non-string panic payload".into())
}

/// Runs `cfg.steps` updates with real threads and wall-clock timing.
pub fn run_threaded(
    cfg: &OrchestratorConfig,
    pool: &TaskPool,
    params: PolicyParams,
    endpoints: EndpointFactory,
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
    let store = Arc::new(SnapshotStore::new(params, cfg.staleness_bound + 2));
    let trainer = Trainer::new(cfg.grpo.clone(), store.clone());
    let mut assembler = Assembler::new(cfg);
    let limits = cfg.limits();
    let clock = Instant::now();
    let stop = Arc::new(AtomicBool::new(false));
    let (job_tx, job_rx) = unbounded::<RolloutJob>();
    let (msg_tx, msg_rx) = unbounded::<Msg>();

    let mut handles = Vec::with_capacity(workers);
    for worker in 0..workers {
        let (job_rx, msg_tx, store, stop, endpoints) = (
            job_rx.clone(),
            msg_tx.clone(),
            store.clone(),
            stop.clone(),
            endpoints.clone(),
        );
        handles.push(std::thread::spawn(move || {
            let mut endpoint = match catch_unwind(AssertUnwindSafe(|| endpoints())) {
                Ok(Ok(ep)) => Some(ep),
                Ok(Err(_)) => None,
                Err(p) => return drop(msg_tx.send(Msg::Panicked(panic_text(p)))),
            };
            while let Ok(job) = job_rx.recv() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                if endpoint.is_none() {
                    endpoint = endpoints().ok();
                }
                let Some(ep) = endpoint.as_mut() else {
                    let error = OrchestratorError::Sandbox(SandboxError::Unreachable(
                        "could not connect".into(),
                    ));
                    let _ = msg_tx.send(Msg::Failed {
                        job: Box::new(job),
                        error,
                    });
                    continue;
                };
                let snap = store.current();
                let start = clock.elapsed().as_secs_f64();
                let msg = match catch_unwind(AssertUnwindSafe(|| {
                    rollout_one(&snap, &job, ep.as_mut(), &limits)
                })) {
                    Ok(Ok(mut env)) => {
                        let end = clock.elapsed().as_secs_f64();
                        env.enqueue_timestamp = end;
                        Msg::Done {
                            worker,
                            env: Box::new(env),
                            start,
                            end,
                        }
                    }
                    Ok(Err(error)) => {
                        // The connection may be broken; reconnect next time.
                        endpoint = None;
                        Msg::Failed {
                            job: Box::new(job),
                            error,
                        }
                    }
                    Err(p) => Msg::Panicked(panic_text(p)),
                };
                let panicked = matches!(msg, Msg::Panicked(_));
                if msg_tx.send(msg).is_err() || panicked {
                    break;
                }
            }
        }));
    }
    drop(msg_tx);

    let send = |tx: &Sender<RolloutJob>, jobs: Vec<RolloutJob>| {
        for j in jobs {
            let _ = tx.send(j);
        }
    };
    let result = (|| {
        send(&job_tx, assembler.top_up(0, pool, &cfg.task_cycle)?);
        let mut report = RunReport {
            params: PolicyParams::clone(&store.current().params),
            updates: vec![],
            breakdown: vec![],
            trace: RunTrace::default(),
        };
        let mut worker_last = vec![0.0f64; workers];
        let (mut prev_publish, mut prev_start) = (0.0f64, 0.0f64);
        let mut empty_windows = 0usize;
        let mut step = 0usize;
        let timeout = Duration::from_millis(cfg.starvation_timeout_ms);
        while step < cfg.steps {
            if assembler.window_ready() {
                let window = assembler.take_window(store.version());
                send(&job_tx, window.requeue.clone());
                if window.selected.is_empty() {
                    empty_windows += 1;
                    if empty_windows > cfg.max_empty_windows {
                        return Err(OrchestratorError::Starvation(format!(
                            "{empty_windows} consecutive windows"
                        )));
                    }
                    send(&job_tx, assembler.top_up(step, pool, &cfg.task_cycle)?);
                    continue;
                }
                empty_windows = 0;
                if !colocated {
                    send(&job_tx, assembler.top_up(step + 1, pool, &cfg.task_cycle)?);
                }
                let start = clock.elapsed().as_secs_f64();
                let (params, stats) = trainer.train(step, &window)?;
                store.publish(params);
                let end = clock.elapsed().as_secs_f64();
                report.trace.trainings.push((start, end));
                let envelopes: Vec<SampleEnvelope> = window.envelopes().cloned().collect();
                let idle_time = if colocated {
                    worker_last
                        .iter()
                        .map(|l| start - l.max(prev_publish))
                        .sum::<f64>()
                        / workers as f64
                } else {
                    start - prev_publish
                };
                let b = StepBreakdown {
                    step,
                    rollout_time: if colocated {
                        start - prev_publish
                    } else {
                        start - prev_start
                    },
                    reward_time: envelopes.iter().map(|e| e.reward_seconds).sum::<f64>()
                        / workers as f64,
                    train_time: end - start,
                    idle_time,
                    throughput: if end > prev_publish {
                        1.0 / (end - prev_publish)
                    } else {
                        f64::INFINITY
                    },
                    end_time: end,
                };
                let snap = store.current();
                observer(&StepRecord {
                    stats: &stats,
                    breakdown: &b,
                    params: &snap.params,
                    envelopes: &envelopes,
                });
                report.updates.push(stats);
                report.breakdown.push(b);
                step += 1;
                prev_publish = end;
                prev_start = start;
                if colocated {
                    send(&job_tx, assembler.top_up(step, pool, &cfg.task_cycle)?);
                }
                continue;
            }
            match msg_rx.recv_timeout(timeout) {
                Ok(Msg::Done {
                    worker,
                    env,
                    start,
                    end,
                }) => {
                    worker_last[worker] = end;
                    report.trace.rollouts.push((start, end));
                    if let PushOutcome::Rejected(job) = assembler.push(*env, store.version()) {
                        send(&job_tx, vec![job]);
                    }
                }
                Ok(Msg::Failed { job, error }) => {
                    match (&error, assembler.retry(&job, cfg.max_attempts)) {
                        (OrchestratorError::Sandbox(SandboxError::Unreachable(_)), Some(retry)) => {
                            send(&job_tx, vec![retry])
                        }
                        _ => return Err(error),
                    }
                }
                Ok(Msg::Panicked(text)) => return Err(OrchestratorError::WorkerPanic(text)),
                Err(RecvTimeoutError::Timeout) => {
                    return Err(OrchestratorError::Starvation(format!(
                        "{} ms without a rollout",
                        cfg.starvation_timeout_ms
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(OrchestratorError::WorkerPanic(
                        "all rollout workers exited".into(),
                    ))
                }
            }
        }
        report.params = PolicyParams::clone(&store.current().params);
        Ok(report)
    })();

    stop.store(true, Ordering::SeqCst);
    drop(job_tx);
    for h in handles {
        let _ = h.join();
    }
    result
}
