//! Group-relative policy optimization with asymmetric clipping and
//! truncated importance sampling.
//!
//! Per token the surrogate is
//! `min(π_train_old/π_infer_old, C) · min(r·Â, clip(r, 1-ε_low, 1+ε_high)·Â)`
//! with `r = π_θ/π_θ_old`; each group is normalized by its count of unmasked
//! tokens, and groups are combined by mean (default) or sum. There is no KL
//! term.

use crate::policy::{self, Gradient, ParamsError, PolicyParams};
use crate::vocab::Token;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupReduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub tis_cap: f64,
    pub learning_rate: f64,
    pub std_guard: f64,
    pub group_size: usize,
    pub batch_prompts: usize,
    pub update_prompts: usize,
    pub group_reduction: GroupReduction,
    /// Whether masked trajectories count in the group's reward mean and std.
    pub masked_in_stats: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            tis_cap: 2.0,
            learning_rate: 0.5,
            std_guard: 1e-8,
            group_size: 4,
            batch_prompts: 8,
            update_prompts: 5,
            group_reduction: GroupReduction::Mean,
            masked_in_stats: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("every trajectory in the update is masked")]
    EmptyUpdate,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sequence has {tokens} tokens but {records} records")]
    Misaligned { tokens: usize, records: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::InvalidConfig(m));
        if !(self.eps_low > 0.0 && self.eps_low < 1.0) {
            return bad(format!("eps_low must be in (0, 1), got {}", self.eps_low));
        }
        if !(self.eps_high > 0.0) {
            return bad(format!("eps_high must be positive, got {}", self.eps_high));
        }
        if !(self.tis_cap >= 1.0) {
            return bad(format!("tis_cap must be at least 1, got {}", self.tis_cap));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.group_size < 2 {
            return bad(format!(
                "group_size must be at least 2, got {}",
                self.group_size
            ));
        }
        if self.update_prompts == 0 || self.update_prompts >= self.batch_prompts {
            return bad(format!(
                "need 0 < update_prompts < batch_prompts, got {} and {}",
                self.update_prompts, self.batch_prompts
            ));
        }
        Ok(())
    }
}

/// Log-probabilities of one token under the policies of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub logp_train_old: f64,
    pub logp_infer_old: f64,
    pub logp_train_current: f64,
    pub masked: bool,
    pub advantage: f64,
}

/// One trajectory's scored tokens.
///
/// `tokens` (with `prompt` as their preceding context) is needed only to
/// recompute current log-probabilities and gradients; `records` alone
/// determine the objective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceRecords {
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub records: Vec<TokenRecord>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupRecords {
    pub sequences: Vec<SequenceRecords>,
}

impl GroupRecords {
    fn unmasked(&self) -> impl Iterator<Item = &TokenRecord> {
        self.sequences
            .iter()
            .flat_map(|s| s.records.iter())
            .filter(|r| !r.masked)
    }

    pub fn unmasked_tokens(&self) -> usize {
        self.unmasked().count()
    }

    /// True when every unmasked token has zero advantage.
    pub fn is_degenerate(&self) -> bool {
        self.unmasked().all(|r| r.advantage == 0.0)
    }
}

/// `(R_i - mean) / std` with population std; all zeros when `std < eps`.
pub fn compute_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Advantages for a group with trajectory masks.
///
/// With `masked_in_stats` the masked rewards enter the mean and std; masked
/// trajectories always receive advantage 0 since they never enter the loss.
pub fn group_advantages(
    rewards: &[f64],
    masked: &[bool],
    cfg: &GrpoConfig,
) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let adv = if cfg.masked_in_stats {
        compute_advantages(rewards, cfg.std_guard)?
    } else {
        let kept: Vec<f64> = rewards
            .iter()
            .zip(masked)
            .filter(|(_, m)| !**m)
            .map(|(r, _)| *r)
            .collect();
        if kept.len() < 2 {
            vec![0.0; rewards.len()]
        } else {
            let a = compute_advantages(&kept, cfg.std_guard)?;
            let mut it = a.into_iter();
            masked
                .iter()
                .map(|m| {
                    if *m {
                        0.0
                    } else {
                        it.next().expect("one per kept")
                    }
                })
                .collect()
        }
    };
    Ok(adv
        .into_iter()
        .zip(masked)
        .map(|(a, m)| if *m { 0.0 } else { a })
        .collect())
}

pub fn tis_weight(rec: &TokenRecord, cap: f64) -> f64 {
    (rec.logp_train_old - rec.logp_infer_old).exp().min(cap)
}

fn ratio(rec: &TokenRecord) -> f64 {
    (rec.logp_train_current - rec.logp_train_old).exp()
}

pub fn clipped_term(rec: &TokenRecord, eps_low: f64, eps_high: f64) -> f64 {
    let r = ratio(rec);
    let a = rec.advantage;
    (r * a).min(r.clamp(1.0 - eps_low, 1.0 + eps_high) * a)
}

/// Whether the unclipped branch is the active one, so the term depends on θ.
fn unclipped_active(rec: &TokenRecord, eps_low: f64, eps_high: f64) -> bool {
    let r = ratio(rec);
    let c = r.clamp(1.0 - eps_low, 1.0 + eps_high);
    c == r || r * rec.advantage < c * rec.advantage
}

/// Counted groups and the divisor their sum is reduced by.
fn reduction(groups: &[GroupRecords], cfg: &GrpoConfig) -> Result<(Vec<bool>, f64), GrpoError> {
    if groups.iter().all(|g| g.unmasked_tokens() == 0) {
        return Err(GrpoError::EmptyUpdate);
    }
    let counted: Vec<bool> = groups
        .iter()
        .map(|g| g.unmasked_tokens() > 0 && !g.is_degenerate())
        .collect();
    let n = counted.iter().filter(|c| **c).count();
    let div = match cfg.group_reduction {
        GroupReduction::Mean => n.max(1) as f64,
        GroupReduction::Sum => 1.0,
    };
    Ok((counted, div))
}

/// The surrogate objective from stored records.
pub fn objective(groups: &[GroupRecords], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let (counted, div) = reduction(groups, cfg)?;
    let mut total = 0.0;
    for (g, _) in groups.iter().zip(&counted).filter(|(_, c)| **c) {
        let n = g.unmasked_tokens() as f64;
        let mut s = 0.0;
        for rec in g.unmasked() {
            s += tis_weight(rec, cfg.tis_cap) * clipped_term(rec, cfg.eps_low, cfg.eps_high);
        }
        total += s / n;
    }
    Ok(total / div)
}

/// Recomputes `logp_train_current` of every record from `params`.
pub fn refresh_current(
    groups: &mut [GroupRecords],
    params: &PolicyParams,
) -> Result<(), GrpoError> {
    for g in groups.iter_mut() {
        for s in g.sequences.iter_mut() {
            if s.tokens.len() != s.records.len() {
                return Err(GrpoError::Misaligned {
                    tokens: s.tokens.len(),
                    records: s.records.len(),
                });
            }
            let lps = policy::token_logprobs(
                params,
                &s.prompt,
                &s.tokens,
                &policy::SamplingConfig::training(),
            );
            for (rec, lp) in s.records.iter_mut().zip(lps) {
                rec.logp_train_current = lp;
            }
        }
    }
    Ok(())
}

/// The objective with current log-probabilities taken from `params`.
pub fn objective_at(
    groups: &[GroupRecords],
    cfg: &GrpoConfig,
    params: &PolicyParams,
) -> Result<f64, GrpoError> {
    let mut g = groups.to_vec();
    refresh_current(&mut g, params)?;
    objective(&g, cfg)
}

/// Exact gradient of [`objective_at`] with respect to `W`.
///
/// The importance weight and the old log-probabilities are constants; a
/// token whose clip branch binds contributes nothing.
pub fn gradient(
    groups: &[GroupRecords],
    cfg: &GrpoConfig,
    params: &PolicyParams,
) -> Result<Gradient, GrpoError> {
    let mut groups = groups.to_vec();
    refresh_current(&mut groups, params)?;
    let (counted, div) = reduction(&groups, cfg)?;
    let mut grad = Gradient::zeros_like(params);
    for (g, _) in groups.iter().zip(&counted).filter(|(_, c)| **c) {
        let n = g.unmasked_tokens() as f64;
        for s in &g.sequences {
            let scales: Vec<f64> = s
                .records
                .iter()
                .map(|rec| {
                    if rec.masked
                        || rec.advantage == 0.0
                        || !unclipped_active(rec, cfg.eps_low, cfg.eps_high)
                    {
                        0.0
                    } else {
                        tis_weight(rec, cfg.tis_cap) * rec.advantage * ratio(rec) / (n * div)
                    }
                })
                .collect();
            if scales.iter().any(|x| *x != 0.0) {
                policy::accumulate_grad_log_prob(&mut grad, params, &s.prompt, &s.tokens, |i| {
                    scales[i]
                });
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub params: PolicyParams,
    pub objective: f64,
    pub grad_norm: f64,
}

/// One ascent step on the objective.
pub fn update(
    groups: &[GroupRecords],
    cfg: &GrpoConfig,
    params: &PolicyParams,
) -> Result<UpdateOutcome, GrpoError> {
    let objective = objective_at(groups, cfg, params)?;
    let g = gradient(groups, cfg, params)?;
    let params = policy::apply_update(params, &g, cfg.learning_rate)?;
    Ok(UpdateOutcome {
        params,
        objective,
        grad_norm: g.norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(adv: f64, cur: f64, old: f64, infer: f64) -> TokenRecord {
        TokenRecord {
            logp_train_old: old,
            logp_infer_old: infer,
            logp_train_current: cur,
            masked: false,
            advantage: adv,
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(compute_advantages(&[1.0; 4], 1e-8).unwrap(), vec![0.0; 4]);
        let a = compute_advantages(&[1.0, 0.0, 0.0, 0.0], 1e-8).unwrap();
        let s3 = 3f64.sqrt();
        for (x, want) in a.iter().zip([s3, -1.0 / s3, -1.0 / s3, -1.0 / s3]) {
            assert!(close(*x, want));
        }
        assert_eq!(
            compute_advantages(&[1.0, 0.0], 1e-8).unwrap(),
            vec![1.0, -1.0]
        );
        assert!(matches!(
            compute_advantages(&[1.0], 1e-8),
            Err(GrpoError::GroupTooSmall(1))
        ));
    }

    #[test]
    fn masked_statistics_modes() {
        let mut cfg = GrpoConfig::default();
        let r = [1.0, 0.0, 0.0, 0.0];
        let m = [false, false, false, true];
        let inc = group_advantages(&r, &m, &cfg).unwrap();
        let s3 = 3f64.sqrt();
        assert!(close(inc[0], s3) && inc[3] == 0.0);
        cfg.masked_in_stats = false;
        let exc = group_advantages(&r, &m, &cfg).unwrap();
        let s2 = 2f64.sqrt();
        assert!(close(exc[0], s2) && close(exc[1], -1.0 / s2) && exc[3] == 0.0);
    }

    #[test]
    fn tis_examples() {
        assert_eq!(tis_weight(&rec(1.0, -1.0, -0.7, -0.7), 2.0), 1.0);
        assert_eq!(
            tis_weight(&rec(1.0, 0.0, 0.5f64.ln(), 0.1f64.ln()), 2.0),
            2.0
        );
        assert!(close(
            tis_weight(&rec(1.0, 0.0, 0.1f64.ln(), 0.5f64.ln()), 2.0),
            0.2
        ));
    }

    #[test]
    fn clip_examples() {
        assert!(close(
            clipped_term(&rec(-3.5, -1.0, -1.0, -1.0), 0.2, 0.28),
            -3.5
        ));
        assert!(close(
            clipped_term(&rec(1.0, 1.5f64.ln(), 0.0, 0.0), 0.2, 0.28),
            1.28
        ));
        assert!(close(
            clipped_term(&rec(-1.0, 0.5f64.ln(), 0.0, 0.0), 0.2, 0.28),
            -0.8
        ));
    }

    #[test]
    fn objective_examples() {
        let cfg = GrpoConfig::default();
        let single = GroupRecords {
            sequences: vec![SequenceRecords {
                records: vec![rec(2.0, -1.0, -1.0, -1.0)],
                ..Default::default()
            }],
        };
        assert!(close(objective(&[single], &cfg).unwrap(), 2.0));
        let zero = GroupRecords {
            sequences: vec![SequenceRecords {
                records: vec![rec(0.0, -1.0, -2.0, -1.0); 3],
                ..Default::default()
            }],
        };
        assert_eq!(objective(&[zero], &cfg).unwrap(), 0.0);
        let mut m = rec(1.0, 0.0, 0.0, 0.0);
        m.masked = true;
        let masked = GroupRecords {
            sequences: vec![SequenceRecords {
                records: vec![m],
                ..Default::default()
            }],
        };
        assert!(matches!(
            objective(&[masked], &cfg),
            Err(GrpoError::EmptyUpdate)
        ));
    }

    #[test]
    fn binding_clip_gives_zero_gradient() {
        use crate::policy::{Matrix, PolicyParams};
        let p = PolicyParams::from_weights(
            Matrix::from_vec(2, 3, vec![0.4, -0.1, 0.2, 1.0, 0.0, -1.0]),
            1,
        )
        .unwrap();
        let tokens = vec![Token(0), Token(2)];
        let cur = policy::token_logprobs(&p, &[], &tokens, &policy::SamplingConfig::training());
        // Old log-probs far below current: r ≫ 1 + eps_high with positive advantage.
        let records = cur.iter().map(|c| rec(1.0, *c, c - 2.0, c - 2.0)).collect();
        let g = GroupRecords {
            sequences: vec![SequenceRecords {
                prompt: vec![],
                tokens,
                records,
            }],
        };
        let grad = gradient(&[g], &GrpoConfig::default(), &p).unwrap();
        assert!(grad.is_zero());
    }
}
