use crate::config::{DirLock, Driver, RunConfig};
use crate::{CliError, Common, ModeArg, StrategyArg};
use agentrl::io::write_atomic;
use agentrl::merge::{merge_checkpoints, ConsensusRule, Scope};
use agentrl::orchestrator::{
    derive_seed, next_task, rollout_one, run_simulated, run_threaded, steady_state_throughput,
    write_metrics_csv, write_trajectories, write_updates_csv, EndpointFactory, Mode,
    OrchestratorError, RolloutJob, RunReport, Snapshot, StepRecord,
};
use agentrl::policy::PolicyParams;
use agentrl::sandbox::{InProcessEndpoint, SandboxEndpoint, SandboxManager};
use agentrl::tts::{
    self, avg_logprob, trace_confidence, Candidate, CandidatePool, HttpJudge, Judge, RoleFilter,
    Strategy, TtsError,
};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

fn load(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &c.out_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.orchestrator.seed = cfg.seed;
    Ok(cfg)
}

fn file_stem(prompt_id: &str) -> String {
    prompt_id
        .chars()
        .map(|ch| {
            if ch.is_ascii_alphanumeric() || ch == '-' {
                ch
            } else {
                '_'
            }
        })
        .collect()
}

pub fn rollout(c: &Common, prompts: usize, group_size: usize) -> Result<(), CliError> {
    if group_size == 0 {
        return Err(CliError::Usage("--group-size must be at least 1".into()));
    }
    let cfg = load(c)?;
    let suites = cfg.load_suites()?;
    let params = Arc::new(cfg.initial_params(&suites)?);
    let pool = cfg.pool(&suites, &params)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let pool_dir = cfg.output_dir.join("pools");
    std::fs::create_dir_all(&pool_dir)?;

    let snap = Snapshot {
        version: 0,
        params: params.clone(),
    };
    let mut endpoint = InProcessEndpoint::new(Arc::new(SandboxManager::new(pool.tasks())));
    let k = cfg.top_k.min(params.meta().vocab);
    let mut limits = cfg.orchestrator.limits();
    limits.sampling.record_top_k = k;
    let mut envelopes = Vec::new();
    let mut solved = 0usize;
    for p in 0..prompts {
        let sources = pool.get(next_task(&cfg.orchestrator.task_cycle, p))?;
        let source = sources
            [(derive_seed(cfg.seed ^ 0x5eed, &[p as u64]) % sources.len() as u64) as usize]
            .clone();
        let prompt_id = format!("{}@{p}", source.task().id);
        let mut candidates = Vec::with_capacity(group_size);
        for i in 0..group_size {
            let job = RolloutJob {
                group_id: p as u64,
                prompt_id: prompt_id.clone(),
                sample_index: i,
                attempt: 0,
                seed: derive_seed(cfg.seed, &[p as u64, i as u64]),
                source: source.clone(),
            };
            let env = rollout_one(&snap, &job, &mut endpoint, &limits)?;
            candidates.push(Candidate::from_envelope(&env, Some(env.reward > 0.5)));
            envelopes.push(env);
        }
        let passed = candidates
            .iter()
            .filter(|c| c.correct == Some(true))
            .count();
        solved += usize::from(passed > 0);
        println!(
            "{prompt_id}\tpass_rate {:.4}\t({passed}/{group_size})",
            passed as f64 / group_size as f64
        );
        let pool = CandidatePool::new(prompt_id.clone(), candidates, k, params.meta().vocab)?;
        tts::write_pool(
            &pool_dir.join(format!("{}.jsonl", file_stem(&prompt_id))),
            &pool,
        )?;
    }
    write_trajectories(&cfg.output_dir.join("trajectories.jsonl"), &envelopes)?;
    let rate =
        envelopes.iter().filter(|e| e.reward > 0.5).count() as f64 / envelopes.len().max(1) as f64;
    println!(
        "prompts {prompts}\tsamples {}\tmean pass_rate {rate:.4}\tpass@{group_size} {:.4}",
        envelopes.len(),
        solved as f64 / prompts.max(1) as f64
    );
    Ok(())
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.afpk"))
}

fn run_training(
    cfg: &RunConfig,
    params: PolicyParams,
    pool: &agentrl::orchestrator::TaskPool,
    observer: &mut dyn FnMut(&StepRecord),
) -> Result<RunReport, CliError> {
    Ok(match cfg.driver {
        Driver::Simulated => run_simulated(&cfg.orchestrator, pool, params, observer)?,
        Driver::Threaded => {
            let manager = Arc::new(SandboxManager::new(pool.tasks()));
            let factory: EndpointFactory = Arc::new(move || {
                Ok(Box::new(InProcessEndpoint::new(manager.clone())) as Box<dyn SandboxEndpoint>)
            });
            run_threaded(&cfg.orchestrator, pool, params, factory, observer)?
        }
    })
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn train(c: &Common, mode: Option<ModeArg>, steps: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load(c)?;
    if let Some(m) = mode {
        cfg.orchestrator.mode = match m {
            ModeArg::Colocated => Mode::Colocated,
            ModeArg::Disaggregated => Mode::Disaggregated,
        };
    }
    if let Some(s) = steps {
        cfg.orchestrator.steps = s;
    }
    let suites = cfg.load_suites()?;
    let params = cfg.initial_params(&suites)?;
    let pool = cfg.pool(&suites, &params)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    params.save(&checkpoint_path(&ckpt_dir, 0))?;
    write_atomic(
        &cfg.output_dir.join("config.json"),
        serde_json::to_string_pretty(&cfg)
            .expect("config serializes")
            .as_bytes(),
    )?;

    let total = cfg.orchestrator.steps;
    let interval = cfg.checkpoint_interval;
    let mut save_error = None;
    let mut observer = |r: &StepRecord| {
        let done = r.stats.step + 1;
        if save_error.is_none() && (done == total || (interval > 0 && done.is_multiple_of(interval))) {
            save_error = r.params.save(&checkpoint_path(&ckpt_dir, done)).err();
        }
        println!(
            "step {done}\treward {:.4}\tentropy {:.4}\tthroughput {:.4}",
            r.stats.mean_reward, r.stats.mean_entropy, r.breakdown.throughput
        );
    };
    let report = run_training(&cfg, params, &pool, &mut observer)?;
    if let Some(e) = save_error {
        return Err(e.into());
    }
    write_metrics_csv(
        &cfg.output_dir.join("metrics.csv"),
        &report.breakdown,
        &report.updates,
    )?;
    write_updates_csv(&cfg.output_dir.join("updates.csv"), &report.updates)?;
    let curve = report.reward_curve();
    let n = curve.len().min(10);
    println!(
        "updates {}\tmean reward first {n}: {:.4}\tlast {n}: {:.4}",
        curve.len(),
        mean(&curve[..n]),
        mean(&curve[curve.len() - n..])
    );
    Ok(())
}

pub fn merge(
    c: &Common,
    base: &Path,
    out: &Path,
    top_p: Option<f64>,
    rule: Option<String>,
    scope: Option<String>,
    models: &[PathBuf],
) -> Result<(), CliError> {
    let cfg = load(c)?;
    let mut m = cfg.merge;
    if let Some(p) = top_p {
        m.top_p = p;
    }
    match rule.as_deref() {
        Some("majority") => m.consensus_rule = ConsensusRule::Majority,
        Some(_) => m.consensus_rule = ConsensusRule::Unanimity,
        None => {}
    }
    match scope.as_deref() {
        Some("whole_model") => m.scope = Scope::WholeModel,
        Some(_) => m.scope = Scope::PerMatrix,
        None => {}
    }
    let refs: Vec<&Path> = models.iter().map(PathBuf::as_path).collect();
    merge_checkpoints(base, &refs, &m, out)?;
    println!("merged {} checkpoints into {}", models.len(), out.display());
    Ok(())
}

pub struct SelectOpts {
    pub strategy: StrategyArg,
    pub role_filter: Option<String>,
    pub k: Option<usize>,
    pub invert_confidence: bool,
    pub group_size: Option<usize>,
    pub judge_url: Option<String>,
    pub judge_timeout_ms: u64,
}

struct LogprobJudge;

impl Judge for LogprobJudge {
    fn judge(&self, pool: &CandidatePool, group: &[usize]) -> Result<usize, TtsError> {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (pos, &i) in group.iter().enumerate() {
            let s = avg_logprob(&pool.candidates[i], RoleFilter::All).unwrap_or(f64::NEG_INFINITY);
            if s > best_score {
                (best, best_score) = (pos, s);
            }
        }
        Ok(best)
    }
}

fn cell(v: Result<f64, TtsError>) -> String {
    v.map_or_else(|_| "-".into(), |v| format!("{v:.6}"))
}

pub fn select(c: &Common, path: &Path, o: SelectOpts) -> Result<(), CliError> {
    let cfg = load(c)?;
    let mut sel = cfg.select;
    if let Some(f) = &o.role_filter {
        sel.role_filter = f.parse()?;
    }
    if let Some(g) = o.group_size {
        sel.group_size = g;
    }
    sel.invert_confidence |= o.invert_confidence;
    let pool = tts::read_pool(path, o.k.unwrap_or(cfg.top_k), cfg.policy.vocab)?;
    let strategy = match o.strategy {
        StrategyArg::Majority => Strategy::Majority,
        StrategyArg::Logprob => Strategy::Logprob,
        StrategyArg::Confidence => Strategy::Confidence,
        StrategyArg::Knockout => Strategy::Knockout,
    };
    let chosen = match &o.judge_url {
        Some(url) => tts::select(
            &pool,
            strategy,
            &sel,
            &HttpJudge::new(
                url,
                &pool.prompt_id,
                Duration::from_millis(o.judge_timeout_ms),
            ),
        )?,
        None => tts::select(&pool, strategy, &sel, &LogprobJudge)?,
    };
    println!("selected {chosen}");
    println!("index\toutcome\tcorrect\tavg_logprob\tconfidence");
    for (i, cand) in pool.candidates.iter().enumerate() {
        let correct = cand.correct.map_or("-".to_string(), |b| b.to_string());
        let outcome: String = cand.canonical_outcome.chars().take(16).collect();
        println!(
            "{i}\t{outcome}\t{correct}\t{}\t{}",
            cell(avg_logprob(cand, sel.role_filter)),
            cell(trace_confidence(cand, pool.k, sel.role_filter))
        );
    }
    Ok(())
}

pub fn bench(c: &Common, steps: Option<usize>, warmup: f64) -> Result<(), CliError> {
    let mut cfg = load(c)?;
    if let Some(s) = steps {
        cfg.orchestrator.steps = s;
    }
    let suites = cfg.load_suites()?;
    let params = cfg.initial_params(&suites)?;
    let pool = cfg.pool(&suites, &params)?;
    let mut results = Vec::new();
    for mode in [Mode::Colocated, Mode::Disaggregated] {
        let mut oc = cfg.orchestrator.clone();
        oc.mode = mode;
        let report = run_simulated(&oc, &pool, params.clone(), &mut |_| {})?;
        let tp = steady_state_throughput(&report.breakdown, warmup).ok_or_else(|| {
            OrchestratorError::Config("too few updates for a steady-state throughput".into())
        })?;
        println!(
            "{mode:?}\tthroughput {tp:.6}\toverlap {}",
            report.trace.has_overlap()
        );
        results.push(tp);
    }
    println!("ratio {:.4}", results[1] / results[0]);
    Ok(())
}
