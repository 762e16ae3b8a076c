use super::{inference_log, log_softmax, PolicyParams, SamplingConfig};
use crate::model::{Action, GenerationAction, RoleTag};
use crate::registry::ToolRegistry;
use crate::vocab::{self, Token};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SampledStep {
    pub action: Action,
    /// Action tokens as emitted, sentinels included.
    pub tokens: Vec<Token>,
    /// Inference-distribution log-probability of each emitted token.
    pub logprobs: Vec<f64>,
    /// Top probabilities of the tempered distribution at each position, descending.
    pub top_k: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("tool call could not be completed within {cap} tokens")]
    DecodeFailure {
        cap: usize,
        partial: Vec<Token>,
        logprobs: Vec<f64>,
    },
    #[error("invalid sampling setup: {0}")]
    InvalidConfig(String),
}

/// Seeded token sampler; one instance drives a whole rollout.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplingConfig,
    rng: ChaCha8Rng,
}

/// Samples one action with a fresh generator seeded from `config.seed`.
pub fn sample_step(
    params: &PolicyParams,
    history: &[Token],
    config: &SamplingConfig,
    registry: &ToolRegistry,
) -> Result<SampledStep, SampleError> {
    Sampler::new(*config)?.sample_step(params, history, registry)
}

fn text_allowed(first: bool, registry: &ToolRegistry) -> Vec<Token> {
    let mut out = vec![vocab::END_ACTION, vocab::ANSWER];
    if first && !registry.is_empty() {
        out.push(vocab::BEGIN_CALL);
    }
    out.extend((vocab::PRINTABLE_FIRST..=vocab::PRINTABLE_LAST).map(vocab::char_token));
    out
}

impl Sampler {
    pub fn new(config: SamplingConfig) -> Result<Self, SampleError> {
        config.validate().map_err(SampleError::InvalidConfig)?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.config
    }

    /// Draws one token from the inference distribution restricted to `allowed`.
    ///
    /// The recorded log-probability is that of the unrestricted inference
    /// distribution, so it agrees with [`super::sequence_logprob`]. When every
    /// allowed token lies outside the nucleus, the draw falls back to the
    /// untruncated tempered distribution and records its log-probability.
    fn draw(
        &mut self,
        params: &PolicyParams,
        ctx: &[Token],
        allowed: &[Token],
    ) -> (Token, f64, Vec<f64>) {
        let lp = inference_log(params, ctx, &self.config);
        let mut pick = self.pick(&lp, allowed);
        let mut tempered = None;
        if pick.is_none() {
            let meta = params.meta();
            let row = params.weights().row(super::context_bucket(
                ctx,
                meta.context_window,
                meta.features,
            ));
            let t = log_softmax(row, self.config.temperature);
            pick = self.pick(&t, allowed);
            tempered = Some(t);
        }
        let (tok, logp) =
            pick.expect("allowed set is non-empty and tempered log-softmax is finite");
        let top_k = if self.config.record_top_k == 0 {
            Vec::new()
        } else {
            let t = tempered.unwrap_or_else(|| {
                let meta = params.meta();
                let row = params.weights().row(super::context_bucket(
                    ctx,
                    meta.context_window,
                    meta.features,
                ));
                log_softmax(row, self.config.temperature)
            });
            let mut probs: Vec<f64> = t.iter().map(|l| l.exp()).collect();
            probs.sort_by(|a, b| b.total_cmp(a));
            probs.truncate(self.config.record_top_k.min(probs.len()));
            probs
        };
        (tok, logp, top_k)
    }

    /// Samples from `logp` restricted to `allowed`, weighting relative to the
    /// best allowed token so that deep tails do not underflow to zero.
    fn pick(&mut self, logp: &[f64], allowed: &[Token]) -> Option<(Token, f64)> {
        let finite: Vec<(Token, f64)> = allowed
            .iter()
            .filter_map(|t| logp.get(t.id()).map(|l| (*t, *l)))
            .filter(|(_, l)| l.is_finite())
            .collect();
        let m = finite
            .iter()
            .map(|(_, l)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if finite.is_empty() || !m.is_finite() {
            return None;
        }
        let weights: Vec<(Token, f64)> = finite.iter().map(|&(t, l)| (t, (l - m).exp())).collect();
        let total: f64 = weights.iter().map(|(_, p)| p).sum();
        let mut u = self.rng.random::<f64>() * total;
        for &(t, p) in &weights {
            if u < p {
                return Some((t, logp[t.id()]));
            }
            u -= p;
        }
        let (t, _) = *weights.last().expect("non-empty");
        Some((t, logp[t.id()]))
    }

    /// Samples tokens until an end sentinel, the token cap, or a completed call.
    pub fn sample_step(
        &mut self,
        params: &PolicyParams,
        history: &[Token],
        registry: &ToolRegistry,
    ) -> Result<SampledStep, SampleError> {
        if params.meta().vocab < vocab::MIN_AGENT_VOCAB {
            return Err(SampleError::InvalidConfig(format!(
                "vocabulary of {} is below the {} tokens agent rollouts need",
                params.meta().vocab,
                vocab::MIN_AGENT_VOCAB
            )));
        }
        let cap = self.config.max_action_tokens;
        let mut ctx = history.to_vec();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut top_k = Vec::new();

        let (first, lp, tk) = self.draw(params, &ctx, &text_allowed(true, registry));
        ctx.push(first);
        tokens.push(first);
        logprobs.push(lp);
        top_k.push(tk);

        if first == vocab::BEGIN_CALL {
            let mut decoder = registry.decoder();
            loop {
                if tokens.len() + decoder.min_remaining() > cap {
                    return Err(SampleError::DecodeFailure {
                        cap,
                        partial: tokens,
                        logprobs,
                    });
                }
                let allowed = decoder.allowed();
                let (t, lp, tk) = self.draw(params, &ctx, &allowed);
                ctx.push(t);
                tokens.push(t);
                logprobs.push(lp);
                top_k.push(tk);
                match decoder.push(t) {
                    Ok(Some(call)) => {
                        return Ok(SampledStep {
                            action: Action::ToolCall(call),
                            tokens,
                            logprobs,
                            top_k,
                        })
                    }
                    Ok(None) => {}
                    Err(_) => {
                        return Err(SampleError::DecodeFailure {
                            cap,
                            partial: tokens,
                            logprobs,
                        })
                    }
                }
            }
        }

        let mut last = first;
        while last != vocab::END_ACTION && last != vocab::ANSWER && tokens.len() < cap {
            let (t, lp, tk) = self.draw(params, &ctx, &text_allowed(false, registry));
            ctx.push(t);
            tokens.push(t);
            logprobs.push(lp);
            top_k.push(tk);
            last = t;
        }
        let role_tag = if last == vocab::ANSWER {
            RoleTag::Answer
        } else {
            RoleTag::Think
        };
        let action = Action::Generation(GenerationAction {
            tokens: tokens.clone(),
            role_tag,
        });
        Ok(SampledStep {
            action,
            tokens,
            logprobs,
            top_k,
        })
    }

    /// Draws a single token from the unrestricted inference distribution.
    pub fn sample_token(&mut self, params: &PolicyParams, history: &[Token]) -> (Token, f64) {
        let lp = inference_log(params, history, &self.config);
        let all: Vec<Token> = (0..lp.len() as u32).map(Token).collect();
        self.pick(&lp, &all)
            .expect("distribution has positive mass")
    }
}
