//! Scored hypotheses and candidate sets — the units flowing through all
//! decoders, filters and metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::TokenId;

/// A partial or complete output sequence with its cumulative score.
///
/// `tokens` holds the generated content ids, excluding both the implicit
/// BOS and the terminating EOS; `finished` records whether the hypothesis
/// took the EOS transition. `base_score` is always the pure natural-log
/// likelihood of the sequence (including the EOS step when finished) and is
/// reproducible by re-scoring under the model. `score` is the value the
/// producing decoder last ranked the hypothesis by: equal to `base_score`
/// for standard decoding, and including diversity terms or noisy-model
/// likelihood for the beam variants that modify selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub tokens: Vec<TokenId>,
    pub score: f64,
    pub base_score: f64,
    pub finished: bool,
    /// Index of the parent hypothesis in the previous beam step; 0 for
    /// decoders without beam structure.
    pub parent_index: usize,
}

impl ScoredHypothesis {
    /// The empty hypothesis every search starts from.
    pub fn root() -> Self {
        ScoredHypothesis {
            tokens: Vec::new(),
            score: 0.0,
            base_score: 0.0,
            finished: false,
            parent_index: 0,
        }
    }

    /// Sequence length counting the EOS terminator when present.
    pub fn len_with_eos(&self) -> usize {
        self.tokens.len() + usize::from(self.finished)
    }

    /// Tokens with the EOS id appended when finished; the exact-match
    /// identity used by explored-set bookkeeping.
    pub fn full_sequence(&self, eos: TokenId) -> Vec<TokenId> {
        let mut seq = self.tokens.clone();
        if self.finished {
            seq.push(eos);
        }
        seq
    }
}

/// Deterministic ranking by selection score: higher score first, ties broken
/// by the lexicographically smaller token sequence, then finished first.
pub fn selection_order(a: &ScoredHypothesis, b: &ScoredHypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// Same tie-breaking, ranking by pure log-likelihood.
pub fn base_score_order(a: &ScoredHypothesis, b: &ScoredHypothesis) -> Ordering {
    b.base_score
        .total_cmp(&a.base_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| b.finished.cmp(&a.finished))
}

/// An ordered collection of hypotheses produced for one prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    hypotheses: Vec<ScoredHypothesis>,
}

impl CandidateSet {
    pub fn new(hypotheses: Vec<ScoredHypothesis>) -> Self {
        CandidateSet { hypotheses }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&ScoredHypothesis> {
        self.hypotheses.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredHypothesis> {
        self.hypotheses.iter()
    }

    pub fn as_slice(&self) -> &[ScoredHypothesis] {
        &self.hypotheses
    }

    pub fn into_vec(self) -> Vec<ScoredHypothesis> {
        self.hypotheses
    }

    /// Re-rank in place by descending `base_score` with canonical ties.
    pub fn sort_by_base_score(&mut self) {
        self.hypotheses.sort_by(base_score_order);
    }

    pub fn truncate(&mut self, n: usize) {
        self.hypotheses.truncate(n);
    }

    pub fn mean_base_score(&self) -> f64 {
        if self.hypotheses.is_empty() {
            return 0.0;
        }
        self.hypotheses.iter().map(|h| h.base_score).sum::<f64>() / self.hypotheses.len() as f64
    }
}

impl std::ops::Index<usize> for CandidateSet {
    type Output = ScoredHypothesis;
    fn index(&self, i: usize) -> &ScoredHypothesis {
        &self.hypotheses[i]
    }
}

impl<'a> IntoIterator for &'a CandidateSet {
    type Item = &'a ScoredHypothesis;
    type IntoIter = std::slice::Iter<'a, ScoredHypothesis>;
    fn into_iter(self) -> Self::IntoIter {
        self.hypotheses.iter()
    }
}

impl FromIterator<ScoredHypothesis> for CandidateSet {
    fn from_iter<I: IntoIterator<Item = ScoredHypothesis>>(iter: I) -> Self {
        CandidateSet::new(iter.into_iter().collect())
    }
}
