//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use agentrl::grpo::{self, GroupRecords, GroupReduction, GrpoConfig, SequenceRecords, TokenRecord};
use agentrl::merge::{self, ConsensusRule, MergeConfig, Scope};
use agentrl::model::{
    parse_trajectory, serialize_trajectory, ErrorKind, ObsStatus,
};
use agentrl::orchestrator::{
    evaluate, rollout_one, run_simulated, steady_state_throughput, warm_start, Mode,
    OrchestratorConfig, PromptSource, RolloutJob, RolloutLimits, Snapshot, TaskPool,
};
use agentrl::policy::{self, Matrix, PolicyMeta, PolicyParams, SamplingConfig};
use agentrl::sandbox::protocol::{
    frame, unframe, FrameDecoder, RewardPayload, SandboxRequest, SandboxResponse,
};
use agentrl::sandbox::{InProcessEndpoint, SandboxManager};
use agentrl::tts::{self, Candidate, CandidatePool, OracleJudge, SelectConfig, Strategy};
use agentrl::Token;
use common::gen::{random_args, random_string, random_trajectory};
use common::{big_params, small_params, suite, synthetic_candidate, warm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use std::time::Instant;

const OBJECTIVE_TOL: f64 = 1e-12;
const GRADIENT_REL_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;
const ADV_MEAN_TOL: f64 = 1e-12;
const ADV_STD_TOL: f64 = 1e-9;
const TIS_TOL: f64 = 1e-12;
const SMOKE_INITIAL_MAX: f64 = 0.2;
const SMOKE_TARGET: f64 = 0.6;
const SMOKE_MAX_UPDATES: usize = 300;
const STEPWISE_TARGET: f64 = 0.9;
const BENCH_MIN_RATIO: f64 = 1.2;
const BENCH_STEPS: usize = 200;
const TTS_POOLS: usize = 1000;
const TTS_N: usize = 8;
const TTS_MIN_LIFT: f64 = 0.10;
const FUZZ_MESSAGES: usize = 10_000;
const FUZZ_TRAJECTORIES: usize = 10_000;

type Verdict = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------------------
// Random GRPO instances shared by criteria 1, 2 and 4.

#[derive(Clone)]
struct Instance {
    params: PolicyParams,
    cfg: GrpoConfig,
    /// Per group: (prompt, tokens, reward, masked) per trajectory.
    groups: Vec<Vec<(Vec<Token>, Vec<Token>, f64, bool)>>,
    /// Old log-probabilities per group, trajectory and token: (train, infer).
    old: Vec<Vec<Vec<(f64, f64)>>>,
}

fn naive_logp(params: &PolicyParams, history: &[Token], tok: Token) -> f64 {
    let m = params.meta();
    let row = params.weights().row(policy::context_bucket(
        history,
        m.context_window,
        m.features,
    ));
    let mut max = f64::NEG_INFINITY;
    for &l in row {
        if l > max {
            max = l;
        }
    }
    let mut z = 0.0;
    for &l in row {
        z += (l - max).exp();
    }
    row[tok.id()] - max - z.ln()
}

/// Avoids log-ratio values within `margin` of the clip boundaries.
fn old_offset(rng: &mut ChaCha8Rng, cfg: &GrpoConfig, margin: f64) -> f64 {
    let (lo, hi) = ((1.0 - cfg.eps_low).ln(), (1.0 + cfg.eps_high).ln());
    loop {
        let d: f64 = rng.random_range(-0.6..0.6);
        if (d - lo).abs() > margin && (d - hi).abs() > margin {
            return d;
        }
    }
}

fn random_instance(rng: &mut ChaCha8Rng, equal_old: bool, margin: f64) -> Instance {
    let v = rng.random_range(2..=16);
    let meta = PolicyMeta {
        features: rng.random_range(1..=8),
        vocab: v,
        context_window: rng.random_range(1..=4),
    };
    let data = (0..meta.features * v)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let params = PolicyParams::from_weights(
        Matrix::from_vec(meta.features, v, data),
        meta.context_window,
    )
    .unwrap();
    let cfg = GrpoConfig {
        eps_low: rng.random_range(0.1..0.3),
        eps_high: rng.random_range(0.2..0.4),
        tis_cap: rng.random_range(1.0..3.0),
        group_reduction: if rng.random_bool(0.5) {
            GroupReduction::Mean
        } else {
            GroupReduction::Sum
        },
        masked_in_stats: rng.random_bool(0.5),
        ..GrpoConfig::default()
    };
    loop {
        let g = rng.random_range(2..=8);
        let n_groups = rng.random_range(1..=3);
        let mut groups = Vec::new();
        let mut old = Vec::new();
        for _ in 0..n_groups {
            let degenerate = rng.random_bool(0.2);
            let mut grp = Vec::new();
            let mut grp_old = Vec::new();
            for _ in 0..g {
                let prompt: Vec<Token> = (0..rng.random_range(0..5))
                    .map(|_| Token(rng.random_range(0..v) as u32))
                    .collect();
                let tokens: Vec<Token> = (0..rng.random_range(1..=50))
                    .map(|_| Token(rng.random_range(0..v) as u32))
                    .collect();
                let reward = if degenerate {
                    0.5
                } else {
                    rng.random_range(0.0..1.0)
                };
                let masked = rng.random_bool(0.2);
                let mut hist = prompt.clone();
                let mut lps = Vec::new();
                for &t in &tokens {
                    let cur = naive_logp(&params, &hist, t);
                    let train_old = cur - old_offset(rng, &cfg, margin);
                    let infer_old = if equal_old {
                        train_old
                    } else {
                        train_old + rng.random_range(-1.0..1.0)
                    };
                    lps.push((train_old, infer_old));
                    hist.push(t);
                }
                grp.push((prompt, tokens, reward, masked));
                grp_old.push(lps);
            }
            groups.push(grp);
            old.push(grp_old);
        }
        if groups.iter().flatten().any(|t| !t.3) {
            return Instance {
                params,
                cfg,
                groups,
                old,
            };
        }
    }
}

fn production_records(inst: &Instance) -> Vec<GroupRecords> {
    inst.groups
        .iter()
        .zip(&inst.old)
        .map(|(grp, old)| {
            let rewards: Vec<f64> = grp.iter().map(|t| t.2).collect();
            let masked: Vec<bool> = grp.iter().map(|t| t.3).collect();
            let adv = grpo::group_advantages(&rewards, &masked, &inst.cfg).unwrap();
            let sequences = grp
                .iter()
                .zip(old)
                .zip(&adv)
                .map(|((t, lps), a)| SequenceRecords {
                    prompt: t.0.clone(),
                    tokens: t.1.clone(),
                    records: lps
                        .iter()
                        .map(|&(train, infer)| TokenRecord {
                            logp_train_old: train,
                            logp_infer_old: infer,
                            logp_train_current: 0.0,
                            masked: t.3,
                            advantage: *a,
                        })
                        .collect(),
                })
                .collect();
            GroupRecords { sequences }
        })
        .collect()
}

/// Straight-line objective: advantages, ratios, clipping and the capped
/// importance weight written out token by token.
fn naive_objective(inst: &Instance, with_tis: bool) -> f64 {
    let cfg = &inst.cfg;
    let mut total = 0.0;
    let mut counted = 0usize;
    for (grp, old) in inst.groups.iter().zip(&inst.old) {
        let stats: Vec<f64> = grp
            .iter()
            .filter(|t| cfg.masked_in_stats || !t.3)
            .map(|t| t.2)
            .collect();
        let mut adv = vec![0.0; grp.len()];
        if stats.len() >= 2 {
            let mut mean = 0.0;
            for r in &stats {
                mean += r;
            }
            mean /= stats.len() as f64;
            let mut var = 0.0;
            for r in &stats {
                var += (r - mean) * (r - mean);
            }
            let std = (var / stats.len() as f64).sqrt();
            if std >= cfg.std_guard {
                for (i, t) in grp.iter().enumerate() {
                    if !t.3 {
                        adv[i] = (t.2 - mean) / std;
                    }
                }
            }
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut any_nonzero = false;
        for (i, (t, lps)) in grp.iter().zip(old).enumerate() {
            if t.3 {
                continue;
            }
            let mut hist = t.0.clone();
            for (&tok, &(train_old, infer_old)) in t.1.iter().zip(lps) {
                let cur = naive_logp(&inst.params, &hist, tok);
                hist.push(tok);
                let r = (cur - train_old).exp();
                let clipped = r.max(1.0 - cfg.eps_low).min(1.0 + cfg.eps_high);
                let surrogate = (r * adv[i]).min(clipped * adv[i]);
                let w = if with_tis {
                    (train_old - infer_old).exp().min(cfg.tis_cap)
                } else {
                    1.0
                };
                sum += w * surrogate;
                n += 1;
                any_nonzero |= adv[i] != 0.0;
            }
        }
        if n > 0 && any_nonzero {
            total += sum / n as f64;
            counted += 1;
        }
    }
    match cfg.group_reduction {
        GroupReduction::Mean => total / counted.max(1) as f64,
        GroupReduction::Sum => total,
    }
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let inst = random_instance(&mut rng, false, 0.0);
        let prod = grpo::objective_at(&production_records(&inst), &inst.cfg, &inst.params)
            .map_err(|e| e.to_string())?;
        let naive = naive_objective(&inst, true);
        let err = (prod - naive).abs();
        worst = worst.max(err);
        check(err <= OBJECTIVE_TOL, || {
            format!("instance {i}: production {prod} vs naive {naive}")
        })?;
    }
    Ok(format!(
        "100 instances, max |Δ| = {worst:.2e} (tol {OBJECTIVE_TOL:.0e})"
    ))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for i in 0..100 {
        let inst = random_instance(&mut rng, false, 1e-3);
        let groups = production_records(&inst);
        let analytic =
            grpo::gradient(&groups, &inst.cfg, &inst.params).map_err(|e| e.to_string())?;
        let (meta, mats) = inst.params.clone().into_parts();
        let w = mats["W"].clone();
        let at = |k: usize, delta: f64| {
            let mut m = mats.clone();
            m.get_mut("W").unwrap().as_mut_slice()[k] = w.as_slice()[k] + delta;
            let p = PolicyParams::from_parts(meta, m).unwrap();
            grpo::objective_at(&groups, &inst.cfg, &p).unwrap()
        };
        let (mut diff, mut norm) = (0.0, 0.0);
        for (k, a) in analytic.weights().as_slice().iter().enumerate() {
            let fd = (at(k, FD_STEP) - at(k, -FD_STEP)) / (2.0 * FD_STEP);
            diff += (fd - a) * (fd - a);
            norm += a * a;
        }
        if norm > 0.0 {
            nonzero += 1;
        }
        let rel = diff.sqrt() / norm.sqrt().max(1e-8);
        worst = worst.max(rel);
        check(rel <= GRADIENT_REL_TOL, || {
            format!("instance {i}: relative error {rel:.3e}")
        })?;
    }
    check(nonzero >= 90, || {
        format!("only {nonzero} instances had a nonzero gradient")
    })?;
    Ok(format!("100 instances ({nonzero} nonzero), max relative error {worst:.2e} (tol {GRADIENT_REL_TOL:.0e})"))
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let g = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = grpo::compute_advantages(&rewards, 1e-8).map_err(|e| e.to_string())?;
        let mean = a.iter().sum::<f64>() / g as f64;
        let std = (a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / g as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_std = worst_std.max((std - 1.0).abs());
        check(
            mean.abs() <= ADV_MEAN_TOL && (std - 1.0).abs() <= ADV_STD_TOL,
            || format!("group {i}: mean {mean:e}, std {std}"),
        )?;

        // Dyadic rewards and group sizes keep every intermediate exact.
        let g2 = 1usize << rng.random_range(1..=4);
        let dy: Vec<f64> = (0..g2)
            .map(|_| rng.random_range(0..=8) as f64 / 8.0)
            .collect();
        let c = rng.random_range(-100..=100) as f64;
        let shifted: Vec<f64> = dy.iter().map(|r| r + c).collect();
        let (x, y) = (
            grpo::compute_advantages(&dy, 1e-8).unwrap(),
            grpo::compute_advantages(&shifted, 1e-8).unwrap(),
        );
        check(
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()),
            || format!("shift {c} changed {dy:?}"),
        )?;

        let constant = vec![rng.random_range(-5.0..5.0); g];
        check(
            grpo::compute_advantages(&constant, 1e-8)
                .unwrap()
                .iter()
                .all(|x| *x == 0.0),
            || "degenerate group not zero".into(),
        )?;
    }
    Ok(format!("1000 groups, max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}; shift exact; degenerate = 0"))
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let inst = random_instance(&mut rng, true, 0.0);
        let mut groups = production_records(&inst);
        grpo::refresh_current(&mut groups, &inst.params).map_err(|e| e.to_string())?;
        for rec in groups
            .iter()
            .flat_map(|g| &g.sequences)
            .flat_map(|s| &s.records)
        {
            let w = grpo::tis_weight(rec, inst.cfg.tis_cap);
            check(w == 1.0, || format!("instance {i}: TIS weight {w}"))?;
        }
        let prod = grpo::objective(&groups, &inst.cfg).map_err(|e| e.to_string())?;
        let plain = naive_objective(&inst, false);
        worst = worst.max((prod - plain).abs());
        check((prod - plain).abs() <= TIS_TOL, || {
            format!("instance {i}: {prod} vs plain {plain}")
        })?;
    }
    Ok(format!(
        "100 instances, all weights 1, max |Δ| {worst:.1e} (tol {TIS_TOL:.0e})"
    ))
}

// ---------------------------------------------------------------------------

fn criterion_5() -> Verdict {
    let started = Instant::now();
    let tasks = suite("retail");
    let arc_tasks: Vec<_> = tasks.iter().cloned().map(Arc::new).collect();
    let eval_sources: Vec<Arc<PromptSource>> = arc_tasks
        .iter()
        .map(|t| Arc::new(PromptSource::Episode { task: t.clone() }))
        .collect();
    let limits = RolloutLimits::default();
    let mut params = warm_start(&big_params(), &arc_tasks, 6, 60.0).map_err(|e| e.to_string())?;
    let initial = evaluate(&Arc::new(params.clone()), &eval_sources, 20, &limits, 99)
        .map_err(|e| e.to_string())?;
    check(initial < SMOKE_INITIAL_MAX, || {
        format!("initial reward {initial:.3} not below {SMOKE_INITIAL_MAX}")
    })?;

    let mut pool = TaskPool::new();
    pool.insert_episodes("tool", tasks.clone());
    let mut cfg = OrchestratorConfig {
        task_cycle: vec!["tool".into()],
        rollout_workers: 8,
        train_workers: 8,
        steps: 10,
        ..Default::default()
    };
    cfg.grpo.learning_rate = 100.0;
    let mut updates = 0;
    let mut reached = None;
    while updates < SMOKE_MAX_UPDATES {
        cfg.seed = updates as u64;
        let report = run_simulated(&cfg, &pool, params, &mut |_| {}).map_err(|e| e.to_string())?;
        check(report.trace.has_overlap(), || {
            "disaggregated run without overlap".into()
        })?;
        params = report.params;
        updates += cfg.steps;
        let r = evaluate(&Arc::new(params.clone()), &eval_sources, 20, &limits, 99)
            .map_err(|e| e.to_string())?;
        if r > SMOKE_TARGET {
            reached = Some((updates, r));
            break;
        }
    }
    let (at, reward) = reached.ok_or_else(|| {
        format!("reward stayed at or below {SMOKE_TARGET} for {SMOKE_MAX_UPDATES} updates")
    })?;
    let episode = format!(
        "retail {initial:.3} -> {reward:.3} after {at} updates ({:.0}s)",
        started.elapsed().as_secs_f64()
    );

    let started = Instant::now();
    let p0 = big_params();
    let mut sources = Vec::new();
    for t in &arc_tasks {
        sources.extend(PromptSource::stepwise_from(t, &p0).map_err(|e| e.to_string())?);
    }
    let items: Vec<Arc<PromptSource>> = sources.iter().cloned().map(Arc::new).collect();
    let mut pool = TaskPool::new();
    pool.insert("step", sources);
    let mut cfg = OrchestratorConfig {
        task_cycle: vec!["step".into()],
        steps: 200,
        seed: 5,
        ..Default::default()
    };
    cfg.grpo.learning_rate = 20.0;
    let report = run_simulated(
        &cfg,
        &pool,
        p0.with_token_bias(agentrl::vocab::BEGIN_CALL, 5.0),
        &mut |_| {},
    )
    .map_err(|e| e.to_string())?;
    check(report.trace.has_overlap(), || {
        "step-wise run without overlap".into()
    })?;
    let exact =
        evaluate(&Arc::new(report.params), &items, 20, &limits, 7).map_err(|e| e.to_string())?;
    check(exact > STEPWISE_TARGET, || {
        format!("{episode}; step-wise exact-match {exact:.3} not above {STEPWISE_TARGET}")
    })?;
    Ok(format!(
        "{episode}; step-wise exact-match {exact:.3} over {} items after 200 updates ({:.0}s)",
        items.len(),
        started.elapsed().as_secs_f64()
    ))
}

fn criterion_6() -> Verdict {
    let started = Instant::now();
    let tasks = suite("retail");
    let params = warm(&big_params(), &tasks, 10);
    let mut pool = TaskPool::new();
    pool.insert_episodes("tool", tasks);
    let mut tp = Vec::new();
    for mode in [Mode::Colocated, Mode::Disaggregated] {
        let mut cfg = OrchestratorConfig {
            mode,
            task_cycle: vec!["tool".into()],
            steps: BENCH_STEPS,
            ..Default::default()
        };
        cfg.grpo.learning_rate = 1.0;
        let report =
            run_simulated(&cfg, &pool, params.clone(), &mut |_| {}).map_err(|e| e.to_string())?;
        if mode == Mode::Disaggregated {
            check(report.trace.has_overlap(), || {
                "no training update overlapped an in-flight rollout".into()
            })?;
        }
        tp.push(steady_state_throughput(&report.breakdown, 0.1).ok_or("no steady state")?);
    }
    let ratio = tp[1] / tp[0];
    check(ratio >= BENCH_MIN_RATIO, || {
        format!("throughput ratio {ratio:.3} below {BENCH_MIN_RATIO}")
    })?;
    Ok(format!(
        "lognormal sigma=1, {BENCH_STEPS} steps: disaggregated {:.4}/s vs colocated {:.4}/s, ratio {ratio:.3}, overlap held ({:.0}s)",
        tp[1],
        tp[0],
        started.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------------------

fn row_params(v: &[f64]) -> PolicyParams {
    PolicyParams::from_weights(Matrix::from_rows(&[v.to_vec()]), 1).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> PolicyParams {
    let data = (0..rows * cols)
        .map(|_| match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1e-310 * rng.random_range(-1.0..1.0),
            2 => 1e200 * rng.random_range(-1.0..1.0),
            _ => rng.random_range(-3.0..3.0),
        })
        .collect();
    PolicyParams::from_weights(Matrix::from_vec(rows, cols, data), 2).unwrap()
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Identity merge.
    let base = random_params(&mut rng, 16, 128);
    let model = random_params(&mut rng, 16, 128);
    let fused = merge::merge(&base, std::slice::from_ref(&model), &MergeConfig::default())
        .map_err(|e| e.to_string())?;
    check(
        fused.to_checkpoint_bytes() == model.to_checkpoint_bytes(),
        || "identity merge is not byte-exact".into(),
    )?;

    let zero2 = row_params(&[0.0, 0.0]);
    let set = merge::task_vectors(&zero2, &[row_params(&[1.0, 0.0]), row_params(&[0.0, 2.0])])
        .map_err(|e| e.to_string())?;
    let w = merge::energy_weights(&set, Scope::PerMatrix);
    check(w["W"] == vec![0.2, 0.8], || format!("weights {:?}", w["W"]))?;

    let zero3 = row_params(&[0.0, 0.0, 0.0]);
    let set = merge::task_vectors(
        &zero3,
        &[row_params(&[1.0, 0.0, 3.0]), row_params(&[1.0, 2.0, -3.0])],
    )
    .map_err(|e| e.to_string())?;
    let mask = merge::variance_topp_mask(&set, 1.0 / 3.0, Scope::PerMatrix);
    check(mask["W"] == vec![false, false, true], || {
        format!("variance mask {:?}", mask["W"])
    })?;

    let set = merge::task_vectors(&zero2, &[row_params(&[1.0, -1.0]), row_params(&[2.0, 1.0])])
        .map_err(|e| e.to_string())?;
    let w = merge::energy_weights(&set, Scope::PerMatrix);
    let c = merge::sign_consensus_mask(&set, &w, ConsensusRule::Unanimity);
    check(c["W"] == vec![true, false], || {
        format!("consensus {:?}", c["W"])
    })?;

    let perms = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    for t in 0..50 {
        let base = random_params(&mut rng, 3, 8);
        let models: Vec<PolicyParams> = (0..3)
            .map(|_| {
                let (meta, mut m) = random_params(&mut rng, 3, 8).into_parts();
                // Share some coordinates with the base so deltas vanish there.
                for (x, b) in m
                    .get_mut("W")
                    .unwrap()
                    .as_mut_slice()
                    .iter_mut()
                    .zip(base.weights().as_slice())
                {
                    if rng.random_bool(0.2) {
                        *x = *b;
                    }
                }
                PolicyParams::from_parts(meta, m).unwrap()
            })
            .collect();
        let cfg = MergeConfig {
            top_p: rng.random_range(0.05..=1.0),
            consensus_rule: if rng.random_bool(0.5) {
                ConsensusRule::Unanimity
            } else {
                ConsensusRule::Majority
            },
            scope: if rng.random_bool(0.5) {
                Scope::PerMatrix
            } else {
                Scope::WholeModel
            },
        };
        let reference = merge::merge(&base, &models, &cfg)
            .map_err(|e| e.to_string())?
            .to_checkpoint_bytes();
        for p in &perms {
            let permuted: Vec<PolicyParams> = p.iter().map(|&i| models[i].clone()).collect();
            let out = merge::merge(&base, &permuted, &cfg)
                .map_err(|e| e.to_string())?
                .to_checkpoint_bytes();
            check(out == reference, || {
                format!("triple {t}: permutation {p:?} changed the merge")
            })?;
        }
    }
    Ok("identity byte-exact; weights [0.2, 0.8]; mask [0,0,1]; consensus [1,0]; 50 triples permutation-invariant".into())
}

// ---------------------------------------------------------------------------

fn truncate_pool(p: &CandidatePool, n: usize) -> CandidatePool {
    CandidatePool::new(p.prompt_id.clone(), p.candidates[..n].to_vec(), p.k, 128).unwrap()
}

fn selector_accuracy(pools: &[CandidatePool], s: Strategy) -> Result<f64, String> {
    let mut hits = 0usize;
    for p in pools {
        let i =
            tts::select(p, s, &SelectConfig::default(), &OracleJudge).map_err(|e| e.to_string())?;
        hits += usize::from(p.candidates[i].correct == Some(true));
    }
    Ok(hits as f64 / pools.len() as f64)
}

fn check_bounds(pools: &[CandidatePool], label: &str) -> Result<(), String> {
    let mut last = 0.0;
    for n in 1..=TTS_N {
        let bound = tts::pass_at_n(pools, n).map_err(|e| e.to_string())?;
        check(bound >= last, || {
            format!("{label}: pass@{n} {bound} < pass@{} {last}", n - 1)
        })?;
        last = bound;
        let firsts: Vec<CandidatePool> = pools.iter().map(|p| truncate_pool(p, n)).collect();
        for s in [
            Strategy::Majority,
            Strategy::Logprob,
            Strategy::Confidence,
            Strategy::Knockout,
        ] {
            let acc = selector_accuracy(&firsts, s)?;
            check(acc <= bound, || {
                format!("{label}: {s:?} accuracy {acc} exceeds pass@{n} {bound}")
            })?;
        }
        let knockout = selector_accuracy(&firsts, Strategy::Knockout)?;
        check(knockout == bound, || {
            format!("{label}: oracle knockout {knockout} != pass@{n} {bound}")
        })?;
    }
    Ok(())
}

/// Rescores agent tokens under the untempered policy; observation tokens already are.
fn rescored(
    env: &agentrl::orchestrator::SampleEnvelope,
    params: &PolicyParams,
    correct: bool,
) -> Candidate {
    let lps = policy::token_logprobs(
        params,
        &env.context,
        &env.tokens,
        &SamplingConfig::training(),
    );
    let mut c = Candidate::from_envelope(env, Some(correct));
    let mut it = lps.into_iter();
    for step in &mut c.trajectory.steps {
        for lp in step.token_logprobs.iter_mut() {
            *lp = it.next().expect("one log-probability per token");
        }
    }
    c
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let synthetic: Vec<CandidatePool> = (0..TTS_POOLS)
        .map(|_| {
            let p_correct = rng.random_range(0.0..0.5);
            let cs = (0..TTS_N)
                .map(|_| {
                    let lps: Vec<f64> = (0..rng.random_range(1..6))
                        .map(|_| -rng.random_range(0.0..4.0))
                        .collect();
                    let mut c = synthetic_candidate(
                        &format!("o{}", rng.random_range(0..3)),
                        &lps,
                        rng.random_bool(p_correct),
                    );
                    let p: f64 = rng.random_range(0.3..1.0);
                    c.topk_probs = vec![vec![p, 1.0 - p]; lps.len()];
                    c
                })
                .collect();
            CandidatePool::new("p", cs, 2, 128).unwrap()
        })
        .collect();
    check_bounds(&synthetic, "synthetic")?;

    let tasks = suite("retail");
    let params = Arc::new(warm(&small_params(), &tasks, 3));
    let snap = Snapshot {
        version: 0,
        params: params.clone(),
    };
    let mut ep = InProcessEndpoint::new(Arc::new(SandboxManager::new(tasks.clone())));
    let mut tempered = Vec::with_capacity(TTS_POOLS);
    for p in 0..TTS_POOLS {
        let task = Arc::new(tasks[p % tasks.len()].clone());
        let mut cs = Vec::with_capacity(TTS_N);
        for i in 0..TTS_N {
            let correct = rng.random_bool(0.5);
            let temperature = if correct { 0.7 } else { 1.5 };
            let limits = RolloutLimits {
                sampling: SamplingConfig {
                    temperature,
                    record_top_k: 8,
                    ..Default::default()
                },
                ..Default::default()
            };
            let job = RolloutJob {
                group_id: p as u64,
                prompt_id: format!("pool-{p}"),
                sample_index: i,
                attempt: 0,
                seed: (p * TTS_N + i) as u64,
                source: Arc::new(PromptSource::Episode { task: task.clone() }),
            };
            let env = rollout_one(&snap, &job, &mut ep, &limits).map_err(|e| e.to_string())?;
            cs.push(rescored(&env, &params, correct));
        }
        tempered.push(CandidatePool::new(format!("pool-{p}"), cs, 8, 128).unwrap());
    }
    check_bounds(&tempered, "temperature")?;
    let random = tempered
        .iter()
        .map(|p| {
            p.candidates
                .iter()
                .filter(|c| c.correct == Some(true))
                .count() as f64
                / TTS_N as f64
        })
        .sum::<f64>()
        / TTS_POOLS as f64;
    let avg = selector_accuracy(&tempered, Strategy::Logprob)?;
    check(avg - random >= TTS_MIN_LIFT, || {
        format!("AvgLogP {avg:.3} vs random {random:.3}")
    })?;
    let pass = tts::pass_at_n(&tempered, TTS_N).map_err(|e| e.to_string())?;
    Ok(format!(
        "{TTS_POOLS}+{TTS_POOLS} pools: pass@N monotone and bounding; AvgLogP {avg:.3} vs random {random:.3} (+{:.1} pp); knockout = pass@{TTS_N} = {pass:.3}",
        100.0 * (avg - random)
    ))
}

// ---------------------------------------------------------------------------

fn criterion_9() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut requests = Vec::with_capacity(FUZZ_MESSAGES);
    let mut responses = Vec::with_capacity(FUZZ_MESSAGES);
    let mut stream = Vec::new();
    for i in 0..FUZZ_MESSAGES {
        if i % 2 == 0 {
            let m = SandboxRequest {
                request_id: rng.random(),
                sandbox_id: random_string(&mut rng),
                tool: random_string(&mut rng),
                args: random_args(&mut rng),
                is_final: rng.random_bool(0.3),
            };
            let bytes = frame(&m).map_err(|e| e.to_string())?;
            let (back, used): (SandboxRequest, usize) =
                unframe(&bytes).map_err(|e| e.to_string())?;
            check(back == m && used == bytes.len(), || {
                format!("request {i} did not round-trip")
            })?;
            stream.extend_from_slice(&bytes);
            requests.push(m);
        } else {
            let status = if rng.random_bool(0.5) {
                ObsStatus::Ok
            } else {
                ObsStatus::Error
            };
            let m = SandboxResponse {
                request_id: rng.random(),
                status,
                output: random_string(&mut rng),
                error_kind: (status == ObsStatus::Error).then_some(ErrorKind::NotFound),
                reward_payload: rng.random_bool(0.3).then(|| RewardPayload {
                    task_completed: rng.random_bool(0.5),
                    pass_rate: rng.random_range(0.0..=1.0),
                }),
            };
            let bytes = frame(&m).map_err(|e| e.to_string())?;
            let (back, used): (SandboxResponse, usize) =
                unframe(&bytes).map_err(|e| e.to_string())?;
            check(back == m && used == bytes.len(), || {
                format!("response {i} did not round-trip")
            })?;
            responses.push(m);
        }
    }
    // Concatenated request frames decode in order from arbitrary chunking.
    let mut dec = FrameDecoder::new();
    let mut decoded = Vec::new();
    let mut at = 0;
    while at < stream.len() {
        let end = (at + rng.random_range(1..200)).min(stream.len());
        dec.push(&stream[at..end]);
        at = end;
        while let Some(m) = dec
            .next_message::<SandboxRequest>()
            .map_err(|e| e.to_string())?
        {
            decoded.push(m);
        }
    }
    check(decoded == requests && dec.buffered() == 0, || {
        "concatenated frames did not decode to the original sequence".into()
    })?;

    for i in 0..20 {
        let (rows, cols) = (rng.random_range(1..40), rng.random_range(1..130));
        let p = random_params(&mut rng, rows, cols);
        let bytes = p.to_checkpoint_bytes();
        let back = PolicyParams::from_checkpoint_bytes(&bytes).map_err(|e| e.to_string())?;
        let same = back
            .weights()
            .as_slice()
            .iter()
            .zip(p.weights().as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check(
            same && back.meta() == p.meta() && back.to_checkpoint_bytes() == bytes,
            || format!("checkpoint {i} not bitwise"),
        )?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = random_params(&mut rng, 64, 128);
    p.save(&dir.path().join("c.afpk"))
        .map_err(|e| e.to_string())?;
    let back = PolicyParams::load(&dir.path().join("c.afpk")).map_err(|e| e.to_string())?;
    check(
        back.to_checkpoint_bytes() == p.to_checkpoint_bytes(),
        || "checkpoint file not bitwise".into(),
    )?;

    let mut lines = String::new();
    let mut originals = Vec::with_capacity(FUZZ_TRAJECTORIES);
    for i in 0..FUZZ_TRAJECTORIES {
        let t = random_trajectory(&mut rng);
        t.validate()
            .map_err(|e| format!("generator produced an invalid trajectory {i}: {e}"))?;
        let line = serialize_trajectory(&t);
        check(!line.contains('\n'), || {
            format!("trajectory {i} spans lines")
        })?;
        lines.push_str(&line);
        lines.push('\n');
        originals.push(t);
    }
    for (i, (line, t)) in lines.lines().zip(&originals).enumerate() {
        let back = parse_trajectory(line).map_err(|e| format!("trajectory {i}: {e}"))?;
        check(&back == t, || {
            format!("trajectory {i} changed on round-trip")
        })?;
    }
    Ok(format!("{FUZZ_MESSAGES} frames + stream decode; 21 checkpoints bitwise; {FUZZ_TRAJECTORIES} JSONL trajectories"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: Vec<(u8, &str, fn() -> Verdict)> = vec![
        (1, "objective matches naive re-implementation", criterion_1),
        (
            2,
            "analytic gradient matches finite differences",
            criterion_2,
        ),
        (3, "group advantage invariants", criterion_3),
        (4, "TIS reduces to plain clipping", criterion_4),
        (5, "RL smoke runs", criterion_5),
        (6, "disaggregated throughput", criterion_6),
        (7, "merge fixtures and permutation invariance", criterion_7),
        (8, "test-time selection properties", criterion_8),
        (9, "protocol and format round-trips", criterion_9),
    ];
    let handles: Vec<_> = criteria
        .into_iter()
        .map(|(id, name, f)| {
            let h = std::thread::Builder::new()
                .name(format!("criterion-{id}"))
                .spawn(move || {
                    let t = Instant::now();
                    let v = std::panic::catch_unwind(f).unwrap_or_else(|p| {
                        Err(p
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_default())
                    });
                    (v, t.elapsed())
                });
            (id, name, h.unwrap())
        })
        .collect();
    let mut failed = 0;
    for (id, name, h) in handles {
        let (v, elapsed) = h.join().expect("criterion thread");
        match v {
            Ok(detail) => println!(
                "criterion {id} PASS  {name}: {detail} [{:.1}s]",
                elapsed.as_secs_f64()
            ),
            Err(why) => {
                failed += 1;
                println!(
                    "criterion {id} FAIL  {name}: {why} [{:.1}s]",
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
