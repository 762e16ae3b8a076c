//! Feature-hashed softmax policy.
//!
//! The context of a token is the bucket `fnv1a64(last h token ids) mod F`;
//! the logits are the row of `W` for that bucket. The training distribution
//! is always the full temperature-1 softmax. The inference distribution
//! applies a temperature and optional nucleus truncation, which is the
//! controlled train/inference mismatch that importance sampling corrects.

mod params;
mod sampler;

pub use params::{
    apply_update, Gradient, Matrix, ParamsError, PolicyMeta, PolicyParams, DEFAULT_FEATURES,
    DEFAULT_WINDOW, WEIGHTS,
};
pub use sampler::{sample_step, SampleError, SampledStep, Sampler};

use crate::vocab::Token;
use serde::{Deserialize, Serialize};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
    /// Per-step token cap, sentinels included.
    pub max_action_tokens: usize,
    /// How many top probabilities to record per emitted token (0 disables).
    pub record_top_k: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            seed: 0,
            max_action_tokens: 64,
            record_top_k: 0,
        }
    }
}

impl SamplingConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_action_tokens == 0 {
            return Err("max_action_tokens must be positive".into());
        }
        Ok(())
    }

    /// The training distribution's settings: temperature 1, no truncation.
    pub fn training() -> Self {
        Self::default()
    }
}

/// FNV-1a over the little-endian bytes of each token id.
pub fn fnv1a64(tokens: &[Token]) -> u64 {
    let mut h = FNV_OFFSET;
    for t in tokens {
        for b in t.0.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

/// Active feature bucket for a history.
pub fn context_bucket(history: &[Token], h: usize, f: usize) -> usize {
    if history.is_empty() {
        return 0;
    }
    let window = &history[history.len().saturating_sub(h)..];
    (fnv1a64(window) % f as u64) as usize
}

/// Sparse one-hot feature vector of dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Features {
    pub bucket: usize,
    pub dim: usize,
}

impl Features {
    pub fn to_dense(self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        v[self.bucket] = 1.0;
        v
    }
}

pub fn context_features(history: &[Token], h: usize, f: usize) -> Features {
    Features {
        bucket: context_bucket(history, h, f),
        dim: f,
    }
}

/// Log-softmax of `logits / temperature`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scaled.iter().map(|s| (s - m).exp()).sum();
    let lz = z.ln();
    scaled.iter().map(|s| (s - m) - lz).collect()
}

/// Nucleus truncation in log space: keeps the smallest probability-sorted
/// prefix (ties by id ascending) with mass ≥ `top_p` and renormalizes.
pub fn nucleus_log(logp: &[f64], top_p: f64) -> Vec<f64> {
    if top_p >= 1.0 {
        return logp.to_vec();
    }
    let mut order: Vec<usize> = (0..logp.len()).collect();
    order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += logp[i].exp();
        if mass >= top_p {
            break;
        }
    }
    let lm = mass.ln();
    let mut out = vec![f64::NEG_INFINITY; logp.len()];
    for i in kept {
        out[i] = logp[i] - lm;
    }
    out
}

/// Log-probabilities of the inference distribution for raw logits.
pub fn distribution_log(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    nucleus_log(&log_softmax(logits, temperature), top_p)
}

pub fn distribution_from_logits(logits: &[f64], temperature: f64, top_p: f64) -> Vec<f64> {
    distribution_log(logits, temperature, top_p)
        .into_iter()
        .map(f64::exp)
        .collect()
}

fn logits<'p>(params: &'p PolicyParams, history: &[Token]) -> &'p [f64] {
    let meta = params.meta();
    params
        .weights()
        .row(context_bucket(history, meta.context_window, meta.features))
}

pub fn token_distribution(
    params: &PolicyParams,
    history: &[Token],
    config: &SamplingConfig,
) -> Vec<f64> {
    distribution_from_logits(logits(params, history), config.temperature, config.top_p)
}

/// Full temperature-1 softmax.
pub fn training_distribution(params: &PolicyParams, history: &[Token]) -> Vec<f64> {
    token_distribution(params, history, &SamplingConfig::training())
}

pub(crate) fn inference_log(
    params: &PolicyParams,
    history: &[Token],
    config: &SamplingConfig,
) -> Vec<f64> {
    distribution_log(logits(params, history), config.temperature, config.top_p)
}

/// Per-token log-probabilities of `tokens` following `history`.
pub fn token_logprobs(
    params: &PolicyParams,
    history: &[Token],
    tokens: &[Token],
    config: &SamplingConfig,
) -> Vec<f64> {
    let mut ctx = history.to_vec();
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let lp = inference_log(params, &ctx, config);
        out.push(lp.get(t.id()).copied().unwrap_or(f64::NEG_INFINITY));
        ctx.push(t);
    }
    out
}

/// Σ log P(token_i | history ∘ tokens_<i); `-inf` marks an impossible token.
pub fn sequence_logprob(
    params: &PolicyParams,
    history: &[Token],
    tokens: &[Token],
    config: &SamplingConfig,
) -> f64 {
    token_logprobs(params, history, tokens, config)
        .into_iter()
        .sum()
}

/// [`sequence_logprob`] under the training distribution.
pub fn training_logprob(params: &PolicyParams, history: &[Token], tokens: &[Token]) -> f64 {
    sequence_logprob(params, history, tokens, &SamplingConfig::training())
}

/// Adds `scale(i) * ∇ log P(token_i)` to `grad` for each token.
pub fn accumulate_grad_log_prob(
    grad: &mut Gradient,
    params: &PolicyParams,
    history: &[Token],
    tokens: &[Token],
    mut scale: impl FnMut(usize) -> f64,
) {
    let meta = params.meta();
    let mut ctx = history.to_vec();
    for (i, &t) in tokens.iter().enumerate() {
        let s = scale(i);
        if s != 0.0 {
            let b = context_bucket(&ctx, meta.context_window, meta.features);
            let lp = log_softmax(params.weights().row(b), 1.0);
            let row = grad.weights_mut().row_mut(b);
            for (v, (g, l)) in row.iter_mut().zip(&lp).enumerate() {
                let onehot = if v == t.id() { 1.0 } else { 0.0 };
                *g += s * (onehot - l.exp());
            }
        }
        ctx.push(t);
    }
}

/// Analytic gradient of the training log-probability with respect to `W`.
pub fn grad_log_prob(params: &PolicyParams, history: &[Token], tokens: &[Token]) -> Gradient {
    let mut g = Gradient::zeros_like(params);
    accumulate_grad_log_prob(&mut g, params, history, tokens, |_| 1.0);
    g
}

/// Entropy in nats of the training distribution after `history`.
pub fn entropy(params: &PolicyParams, history: &[Token]) -> f64 {
    entropy_of_log(&log_softmax(logits(params, history), 1.0))
}

pub fn entropy_of_log(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .filter(|l| l.is_finite())
        .map(|l| l.exp() * l)
        .sum::<f64>()
}

/// One likelihood-ascent step on demonstration sequences.
///
/// Each demonstration is `(history, tokens, weights)`; `weights[i]` scales
/// the gradient of token `i` (use 0 for tokens the policy does not emit).
/// The step is normalized by the total weight.
pub fn imitation_step(
    params: &PolicyParams,
    demos: &[(Vec<Token>, Vec<Token>, Vec<f64>)],
    learning_rate: f64,
) -> Result<PolicyParams, ParamsError> {
    let mut g = Gradient::zeros_like(params);
    let mut total = 0.0;
    for (history, tokens, weights) in demos {
        total += weights.iter().sum::<f64>();
        accumulate_grad_log_prob(&mut g, params, history, tokens, |i| weights[i]);
    }
    if total <= 0.0 {
        return Ok(params.clone());
    }
    apply_update(params, &g, learning_rate / total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn params_with_row(logits: &[f64]) -> PolicyParams {
        let w = Matrix::from_rows(&[logits.to_vec()]);
        PolicyParams::from_weights(w, 4).unwrap()
    }

    #[test]
    fn empty_history_is_bucket_zero() {
        assert_eq!(context_bucket(&[], 4, 64), 0);
    }

    #[test]
    fn fnv_matches_reference_vector() {
        // FNV-1a of bytes 05 00 00 00, computed independently.
        let mut h: u64 = 0xcbf29ce484222325;
        for b in [5u8, 0, 0, 0] {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        assert_eq!(fnv1a64(&[Token(5)]), h);
        assert_eq!(context_bucket(&[Token(5)], 4, 64), (h % 64) as usize);
    }

    #[test]
    fn window_ignores_old_tokens() {
        let a = [Token(9), Token(1), Token(2), Token(3), Token(4)];
        let b = [Token(77), Token(1), Token(2), Token(3), Token(4)];
        assert_eq!(context_bucket(&a, 4, 64), context_bucket(&b, 4, 64));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = PolicyParams::zeros(PolicyMeta::default());
        let d = token_distribution(&p, &[Token(3)], &SamplingConfig::default());
        assert!(d.iter().all(|x| close(*x, 1.0 / 128.0, 1e-15)));
    }

    #[test]
    fn softmax_and_nucleus_values() {
        let d = distribution_from_logits(&[2.0, 1.0, 0.0, 0.0], 1.0, 1.0);
        for (x, want) in d
            .iter()
            .zip([0.610295685, 0.224515236, 0.082594539, 0.082594539])
        {
            assert!(close(*x, want, 1e-9), "{x} vs {want}");
        }
        let d = distribution_from_logits(&[2.0, 1.0, 0.0, -1.0], 1.0, 1.0);
        for (x, want) in d.iter().zip([0.6439, 0.2369, 0.0871, 0.0321]) {
            assert!(close(*x, want, 5e-5), "{x} vs {want}");
        }
        let d = distribution_from_logits(&[2.0, 1.0, 0.0, 0.0], 1.0, 0.6);
        assert_eq!(d, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn nucleus_ties_prefer_lower_ids() {
        let d = distribution_from_logits(&[0.0, 0.0, 0.0, 0.0], 1.0, 0.5);
        assert_eq!(d, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn sequence_logprob_cases() {
        let p = PolicyParams::zeros(PolicyMeta {
            features: 4,
            vocab: 2,
            context_window: 2,
        });
        let cfg = SamplingConfig::default();
        assert_eq!(sequence_logprob(&p, &[], &[], &cfg), 0.0);
        assert!(close(
            sequence_logprob(&p, &[], &[Token(0), Token(1)], &cfg),
            0.25f64.ln(),
            1e-12
        ));
        let q = params_with_row(&[2.0, 1.0, 0.0, 0.0]);
        let trunc = SamplingConfig { top_p: 0.6, ..cfg };
        assert_eq!(
            sequence_logprob(&q, &[], &[Token(1)], &trunc),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn gradient_for_two_token_vocab() {
        let p = PolicyParams::zeros(PolicyMeta {
            features: 3,
            vocab: 2,
            context_window: 1,
        });
        let g = grad_log_prob(&p, &[], &[Token(0)]);
        assert_eq!(g.weights().row(0), &[0.5, -0.5]);
        assert_eq!(g.weights().row(1), &[0.0, 0.0]);
        assert!(grad_log_prob(&p, &[], &[]).is_zero());
    }

    #[test]
    fn entropy_values() {
        let p = PolicyParams::zeros(PolicyMeta {
            features: 1,
            vocab: 4,
            context_window: 1,
        });
        assert!(close(entropy(&p, &[]), 4f64.ln(), 1e-12));
        let q = params_with_row(&[2.0, 1.0, 0.0, -1.0]);
        assert!(
            close(entropy(&q, &[]), 0.947536964, 1e-9),
            "{}",
            entropy(&q, &[])
        );
        let q = params_with_row(&[2.0, 1.0, 0.0, 0.0]);
        assert!(
            close(entropy(&q, &[]), 1.048705103, 1e-9),
            "{}",
            entropy(&q, &[])
        );
        let r = params_with_row(&[800.0, 0.0, 0.0, 0.0]);
        assert!(entropy(&r, &[]).abs() < 1e-12);
    }

    #[test]
    fn temperature_one_full_nucleus_matches_training_bitwise() {
        let w = Matrix::from_vec(2, 3, vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4]);
        let p = PolicyParams::from_weights(w, 2).unwrap();
        let toks = [Token(2), Token(0), Token(1), Token(1)];
        let a = sequence_logprob(&p, &[Token(1)], &toks, &SamplingConfig::with_seed(9));
        let b = training_logprob(&p, &[Token(1)], &toks);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
