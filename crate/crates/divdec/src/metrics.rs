//! Diversity and quality statistics over a candidate set.
//!
//! * `dist_k` — distinct k-grams divided by total produced tokens;
//! * `ent_k` — frequency-weighted entropy of the pooled k-gram table
//!   (natural log);
//! * `set_perplexity` — per-candidate perplexity, averaged over the set.
//!
//! k-grams are counted within each candidate, never across candidate
//! boundaries, with no padding.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::candidate::CandidateSet;
use crate::error::{Error, Result};
use crate::model::{score_sequence, ConditionalModel, TokenId};

/// Which statistics to compute for a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub dist_ks: Vec<usize>,
    pub ent_ks: Vec<usize>,
    pub perplexity: bool,
}

impl Default for MetricSpec {
    /// Dist-1/2 and Ent-2/4 plus perplexity.
    fn default() -> Self {
        MetricSpec { dist_ks: vec![1, 2], ent_ks: vec![2, 4], perplexity: true }
    }
}

/// Computed statistics for one candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// k → Dist-k.
    pub dist: BTreeMap<usize, f64>,
    /// k → Ent-k in nats.
    pub ent: BTreeMap<usize, f64>,
    /// Mean per-candidate perplexity, when requested.
    pub perplexity: Option<f64>,
    /// Per-candidate log-likelihoods, in candidate order.
    pub candidate_scores: Vec<f64>,
    /// Mean of `candidate_scores`.
    pub mean_base_score: f64,
}

impl MetricsReport {
    /// Flat key-value view (`dist-1`, `ent-4`, `ppl`, `mean_score`) used by
    /// report serialization and the summary table.
    pub fn to_flat(&self) -> BTreeMap<String, f64> {
        let mut flat = BTreeMap::new();
        for (k, v) in &self.dist {
            flat.insert(format!("dist-{k}"), *v);
        }
        for (k, v) in &self.ent {
            flat.insert(format!("ent-{k}"), *v);
        }
        if let Some(p) = self.perplexity {
            flat.insert("ppl".to_string(), p);
        }
        flat.insert("mean_score".to_string(), self.mean_base_score);
        flat
    }
}

fn validate_candidates(candidates: &CandidateSet) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::validation("empty candidate set"));
    }
    if candidates.iter().any(|h| h.len_with_eos() == 0) {
        return Err(Error::validation("zero-length candidate"));
    }
    Ok(())
}

/// Total number of distinct k-grams across all candidates divided by the
/// total number of produced tokens. Candidates shorter than `k` contribute
/// no k-grams but their tokens still count in the denominator; a candidate
/// that terminated immediately (no content tokens) contributes nothing.
pub fn dist_k(candidates: &CandidateSet, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    validate_candidates(candidates)?;
    let mut distinct: HashSet<&[TokenId]> = HashSet::new();
    let mut total_tokens = 0usize;
    for h in candidates {
        total_tokens += h.tokens.len();
        if h.tokens.len() >= k {
            for gram in h.tokens.windows(k) {
                distinct.insert(gram);
            }
        }
    }
    if total_tokens == 0 {
        return Err(Error::validation("candidates produced no tokens"));
    }
    Ok(distinct.len() as f64 / total_tokens as f64)
}

/// Frequency-weighted entropy of the pooled k-gram table:
/// `-(1/sum F) * sum F(w) * ln(F(w)/sum F)`, natural log.
pub fn ent_k(candidates: &CandidateSet, k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::validation("k must be >= 1"));
    }
    validate_candidates(candidates)?;
    // BTreeMap so the accumulation order (and hence rounding) never varies
    // between runs.
    let mut freq: BTreeMap<&[TokenId], u64> = BTreeMap::new();
    for h in candidates {
        if h.tokens.len() >= k {
            for gram in h.tokens.windows(k) {
                *freq.entry(gram).or_insert(0) += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "no {k}-grams exist: every candidate is shorter than {k}"
        )));
    }
    let total: u64 = freq.values().sum();
    let mut ent = 0.0;
    for &f in freq.values() {
        let p = f as f64 / total as f64;
        ent -= p * p.ln();
    }
    Ok(ent)
}

/// Mean per-candidate perplexity under `model`:
/// `ppl_i = exp(-ll_i / len_i)` with the EOS transition counted in both the
/// likelihood and the length for finished candidates. Candidates are
/// re-scored, so persisted sets can be measured without stored scores.
pub fn set_perplexity<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    candidates: &CandidateSet,
) -> Result<f64> {
    validate_candidates(candidates)?;
    let mut total = 0.0;
    for h in candidates {
        let ll = score_sequence(model, prompt, &h.tokens, h.finished)?;
        total += (-ll / h.len_with_eos() as f64).exp();
    }
    Ok(total / candidates.len() as f64)
}

/// Compute every metric requested by `spec` for one prompt's candidates.
pub fn compute_report<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    candidates: &CandidateSet,
    spec: &MetricSpec,
) -> Result<MetricsReport> {
    validate_candidates(candidates)?;
    let mut dist = BTreeMap::new();
    for &k in &spec.dist_ks {
        dist.insert(k, dist_k(candidates, k)?);
    }
    let mut ent = BTreeMap::new();
    for &k in &spec.ent_ks {
        ent.insert(k, ent_k(candidates, k)?);
    }
    let perplexity = if spec.perplexity {
        Some(set_perplexity(model, prompt, candidates)?)
    } else {
        None
    };
    let candidate_scores: Vec<f64> = candidates
        .iter()
        .map(|h| score_sequence(model, prompt, &h.tokens, h.finished))
        .collect::<Result<_>>()?;
    let mean_base_score =
        candidate_scores.iter().sum::<f64>() / candidate_scores.len() as f64;
    Ok(MetricsReport { dist, ent, perplexity, candidate_scores, mean_base_score })
}
