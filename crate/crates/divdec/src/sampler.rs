//! Arg-max decoding and the random-sampling family: temperature scaling,
//! top-s truncation, and seeded multi-candidate generation.
//!
//! Sampled hypotheses always store their *untempered* model log-likelihood,
//! whatever temperature or truncation shaped the draw: ranking, filtering
//! and perplexity all operate on model probabilities.

use crate::candidate::{CandidateSet, ScoredHypothesis};
use crate::error::{Error, Result};
use crate::model::{ConditionalModel, TokenId};
use crate::rng::CounterRng;

/// Configuration for [`sample_candidates`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Softmax temperature; must be positive.
    pub temperature: f64,
    /// Restrict each draw to the `s` most probable tokens when set.
    pub top_s: Option<usize>,
    /// Number of independent candidates to generate.
    pub num_samples: usize,
    /// Maximum generated tokens per candidate.
    pub max_len: usize,
    /// Base seed; candidate `i` draws from substream `mix_seed(seed, i)`.
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(temperature: f64, num_samples: usize, max_len: usize, seed: u64) -> Self {
        SamplerConfig { temperature, top_s: None, num_samples, max_len, seed }
    }

    pub fn with_top_s(mut self, s: usize) -> Self {
        self.top_s = Some(s);
        self
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature {} must be positive and finite",
                self.temperature
            )));
        }
        if let Some(s) = self.top_s {
            if s < 1 || s > vocab_size {
                return Err(Error::validation(format!(
                    "top_s {s} outside [1, {vocab_size}]"
                )));
            }
        }
        if self.num_samples < 1 {
            return Err(Error::validation("num_samples must be >= 1"));
        }
        if self.max_len < 1 {
            return Err(Error::validation("max_len must be >= 1"));
        }
        Ok(())
    }
}

/// Temperature softmax `exp(z_i / T) / sum_j exp(z_j / T)`, computed with
/// max-subtraction. Entry order follows the logits.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::validation(format!(
            "temperature {temperature} must be positive and finite"
        )));
    }
    if logits.is_empty() {
        return Err(Error::validation("empty logit vector"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::validation(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Keep only the `s` highest-probability entries (ties toward lower ids)
/// and renormalize; everything else drops to zero.
pub fn top_s_filter(probs: &[f64], s: usize) -> Result<Vec<f64>> {
    if s < 1 || s > probs.len() {
        return Err(Error::validation(format!("s = {s} outside [1, {}]", probs.len())));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let kept = &order[..s];
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in kept {
        out[i] = probs[i] / total;
    }
    Ok(out)
}

/// Shannon entropy of a probability vector in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Greedily take the most likely token at every step until EOS or
/// `max_len`; ties break toward the lower token id.
pub fn greedy_decode<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<ScoredHypothesis> {
    if max_len < 1 {
        return Err(Error::validation("max_len must be >= 1"));
    }
    let eos = model.vocabulary().eos();
    let mut hyp = ScoredHypothesis::root();
    for _ in 0..max_len {
        let dist = model.step(prompt, &hyp.tokens)?;
        let choice = dist.argmax();
        hyp.base_score += dist.log_probability_of(choice);
        if choice == eos {
            hyp.finished = true;
            break;
        }
        hyp.tokens.push(choice);
    }
    hyp.score = hyp.base_score;
    Ok(hyp)
}

/// Generate `config.num_samples` independent candidates by ancestral
/// sampling. Each step applies the temperature softmax, then the optional
/// top-s truncation, then an inverse-CDF draw over token-id order.
/// Candidate `i` consumes a dedicated substream of the seed, so the result
/// is identical whether candidates are generated in any order or in
/// parallel. Candidates cut at `max_len` are kept, flagged unfinished.
pub fn sample_candidates<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    config: &SamplerConfig,
) -> Result<CandidateSet> {
    let vocab = model.vocabulary();
    config.validate(vocab.size())?;
    let eos = vocab.eos();

    let mut hypotheses = Vec::with_capacity(config.num_samples);
    for i in 0..config.num_samples {
        let mut rng = CounterRng::substream(config.seed, i as u64);
        let mut hyp = ScoredHypothesis::root();
        for _ in 0..config.max_len {
            let dist = model.step(prompt, &hyp.tokens)?;
            let mut probs = softmax_with_temperature(dist.logits(), config.temperature)?;
            if let Some(s) = config.top_s {
                probs = top_s_filter(&probs, s)?;
            }
            let choice = draw_categorical(&probs, rng.next_f64());
            hyp.base_score += dist.log_probability_of(choice);
            if choice == eos {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(choice);
        }
        hyp.score = hyp.base_score;
        hypotheses.push(hyp);
    }
    Ok(CandidateSet::new(hypotheses))
}

/// Inverse-CDF draw over token-id order: the first index whose cumulative
/// probability exceeds `u`. Falls back to the last positive entry when
/// rounding leaves `u` past the total.
fn draw_categorical(probs: &[f64], u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = i;
            if u < cumulative {
                return i as TokenId;
            }
        }
    }
    last_positive as TokenId
}
