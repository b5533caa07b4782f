//! Brute-force reference implementations.
//!
//! Everything here is deliberately naive — plain enumeration and hash-map
//! counting with no pruning — so it can serve as an independent check on
//! the decoders and metrics. Nothing in this module shares selection logic
//! with the search code; only the model contract and the candidate types
//! are reused.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::candidate::{CandidateSet, ScoredHypothesis};
use crate::error::{Error, Result};
use crate::model::{ConditionalModel, TableModel, TokenId, Vocabulary};
use crate::rng::CounterRng;

/// Hard ceiling on enumerated sequences; requests above it are refused.
pub const DEFAULT_ENUMERATION_GUARD: u64 = 1_000_000;

/// Size limits for exhaustive enumeration.
#[derive(Debug, Clone, Copy)]
pub struct EnumerationBudget {
    pub max_len: usize,
    pub max_sequences: u64,
}

impl EnumerationBudget {
    pub fn new(max_len: usize) -> Self {
        EnumerationBudget { max_len, max_sequences: DEFAULT_ENUMERATION_GUARD }
    }

    /// Refuse up front when `V^max_len` exceeds the guard.
    fn check(&self, vocab_size: usize) -> Result<()> {
        let mut total: u128 = 1;
        for _ in 0..self.max_len {
            total = total.saturating_mul(vocab_size as u128);
            if total > self.max_sequences as u128 {
                return Err(Error::BudgetExceeded {
                    requested: total,
                    guard: self.max_sequences,
                });
            }
        }
        Ok(())
    }
}

/// Exact probabilities of every complete sequence reachable within
/// `max_len` steps, plus the leftover mass on truncated continuations.
#[derive(Debug, Clone)]
pub struct SequenceDistribution {
    pub complete: BTreeMap<Vec<TokenId>, f64>,
    pub truncated_mass: f64,
}

impl SequenceDistribution {
    /// Total accounted probability; equals one up to rounding.
    pub fn total_mass(&self) -> f64 {
        self.complete.values().sum::<f64>() + self.truncated_mass
    }

    pub fn probability_of(&self, tokens: &[TokenId]) -> f64 {
        self.complete.get(tokens).copied().unwrap_or(0.0)
    }
}

/// Enumerate every sequence of up to `max_len` decode steps, score each
/// exactly, and return the best `k` by log-likelihood (ties toward the
/// lexicographically smaller sequence). Sequences that do not reach EOS
/// within the budget are included, flagged unfinished.
pub fn exhaustive_topk<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
    k: usize,
) -> Result<CandidateSet> {
    exhaustive_topk_with_budget(model, prompt, k, EnumerationBudget::new(max_len))
}

pub fn exhaustive_topk_with_budget<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    k: usize,
    budget: EnumerationBudget,
) -> Result<CandidateSet> {
    if budget.max_len == 0 {
        return Err(Error::validation("max_len must be >= 1"));
    }
    let vocab = model.vocabulary();
    budget.check(vocab.size())?;
    let eos = vocab.eos();

    let mut found: Vec<ScoredHypothesis> = Vec::new();
    let mut prefix: Vec<TokenId> = Vec::new();
    enumerate_sequences(model, prompt, eos, budget.max_len, &mut prefix, 0.0, &mut |tokens,
                                                                                    ll,
                                                                                    finished| {
        found.push(ScoredHypothesis {
            tokens: tokens.to_vec(),
            score: ll,
            base_score: ll,
            finished,
            parent_index: 0,
        });
    })?;

    found.sort_by(|a, b| {
        b.base_score
            .total_cmp(&a.base_score)
            .then_with(|| a.tokens.cmp(&b.tokens))
            .then_with(|| b.finished.cmp(&a.finished))
    });
    found.truncate(k);
    Ok(CandidateSet::new(found))
}

/// Exact sequence-level distribution of the model within `max_len` steps.
pub fn exact_sampling_distribution<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<SequenceDistribution> {
    let budget = EnumerationBudget::new(max_len);
    if budget.max_len == 0 {
        return Err(Error::validation("max_len must be >= 1"));
    }
    let vocab = model.vocabulary();
    budget.check(vocab.size())?;
    let eos = vocab.eos();

    let mut complete: BTreeMap<Vec<TokenId>, f64> = BTreeMap::new();
    let mut truncated_mass = 0.0;
    let mut prefix: Vec<TokenId> = Vec::new();
    // Track the product of probabilities instead of log sums: this is the
    // sampling-side ground truth, so exactness matters more than range.
    walk_probabilities(model, prompt, eos, max_len, &mut prefix, 1.0, &mut |tokens, p, finished| {
        if finished {
            *complete.entry(tokens.to_vec()).or_insert(0.0) += p;
        } else {
            truncated_mass += p;
        }
    })?;
    Ok(SequenceDistribution { complete, truncated_mass })
}

fn enumerate_sequences<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    eos: TokenId,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    ll: f64,
    emit: &mut impl FnMut(&[TokenId], f64, bool),
) -> Result<()> {
    if prefix.len() == max_len {
        emit(prefix, ll, false);
        return Ok(());
    }
    let log_probs = model.step(prompt, prefix)?.log_probabilities();
    for (id, &lp) in log_probs.iter().enumerate() {
        let id = id as TokenId;
        if id == eos {
            emit(prefix, ll + lp, true);
        } else {
            prefix.push(id);
            enumerate_sequences(model, prompt, eos, max_len, prefix, ll + lp, emit)?;
            prefix.pop();
        }
    }
    Ok(())
}

fn walk_probabilities<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    eos: TokenId,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    mass: f64,
    emit: &mut impl FnMut(&[TokenId], f64, bool),
) -> Result<()> {
    if prefix.len() == max_len {
        emit(prefix, mass, false);
        return Ok(());
    }
    let probs = model.step(prompt, prefix)?.probabilities();
    for (id, &p) in probs.iter().enumerate() {
        let id = id as TokenId;
        if id == eos {
            emit(prefix, mass * p, true);
        } else {
            prefix.push(id);
            walk_probabilities(model, prompt, eos, max_len, prefix, mass * p, emit)?;
            prefix.pop();
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Independent metric recomputation
// ---------------------------------------------------------------------------

/// Distinct k-grams over total tokens, recomputed with plain hash-map
/// counting. Checks the metrics module from the outside.
pub fn naive_dist_k(candidates: &[Vec<TokenId>], k: usize) -> f64 {
    let mut grams: HashSet<Vec<TokenId>> = HashSet::new();
    let mut total_tokens = 0usize;
    for tokens in candidates {
        total_tokens += tokens.len();
        if tokens.len() >= k {
            for window in tokens.windows(k) {
                grams.insert(window.to_vec());
            }
        }
    }
    grams.len() as f64 / total_tokens as f64
}

/// Frequency-weighted k-gram entropy in nats, recomputed naively.
pub fn naive_ent_k(candidates: &[Vec<TokenId>], k: usize) -> f64 {
    let mut freq: HashMap<Vec<TokenId>, u64> = HashMap::new();
    for tokens in candidates {
        if tokens.len() >= k {
            for window in tokens.windows(k) {
                *freq.entry(window.to_vec()).or_insert(0) += 1;
            }
        }
    }
    let total: u64 = freq.values().sum();
    let mut ent = 0.0;
    for &f in freq.values() {
        let p = f as f64 / total as f64;
        ent -= p * p.ln();
    }
    ent
}

// ---------------------------------------------------------------------------
// Random test substrates
// ---------------------------------------------------------------------------

/// A seeded [`TableModel`] whose rules cover every content-token prefix up
/// to `rule_depth`. Each rule distributes mass over the content tokens plus
/// EOS with weights drawn from `[0.1, 1.0]`, keeping all listed
/// probabilities far above the floor assigned to unlisted tokens.
pub fn random_table_model(seed: u64, content_tokens: &[&str], rule_depth: usize) -> TableModel {
    let mut rng = CounterRng::new(seed);
    let mut builder = TableModel::builder(content_tokens.iter().copied());
    let mut prefixes: Vec<Vec<&str>> = vec![Vec::new()];
    for _ in 0..=rule_depth {
        let mut next_level = Vec::new();
        for prefix in &prefixes {
            let mut weights: Vec<f64> =
                (0..=content_tokens.len()).map(|_| rng.next_range(0.1, 1.0)).collect();
            let total: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= total;
            }
            let mut entries: Vec<(&str, f64)> = content_tokens
                .iter()
                .zip(&weights)
                .map(|(&t, &w)| (t, w))
                .collect();
            entries.push((Vocabulary::EOS, weights[content_tokens.len()]));
            builder = builder.rule(prefix, &entries);
            for &t in content_tokens {
                let mut longer = prefix.clone();
                longer.push(t);
                next_level.push(longer);
            }
        }
        prefixes = next_level;
    }
    builder.build().expect("generated rules are normalized")
}

/// A seeded line-delimited corpus over the given word list, for n-gram
/// model fixtures.
pub fn random_ngram_corpus(seed: u64, words: &[&str], lines: usize, max_line_len: usize) -> String {
    let mut rng = CounterRng::new(seed);
    let mut out = String::new();
    for _ in 0..lines {
        let len = 1 + rng.next_index(max_line_len);
        let line: Vec<&str> = (0..len).map(|_| words[rng.next_index(words.len())]).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::score_sequence;

    fn two_choice_table() -> TableModel {
        TableModel::builder(["A", "B"])
            .rule(&[], &[("A", 0.6), ("B", 0.4)])
            .rule(&["A"], &[(Vocabulary::EOS, 1.0)])
            .rule(&["B"], &[(Vocabulary::EOS, 1.0)])
            .build()
            .unwrap()
    }

    #[test]
    fn topk_matches_hand_enumeration() {
        let m = two_choice_table();
        let v = m.vocabulary();
        let a = v.id_of("A").unwrap();
        let b = v.id_of("B").unwrap();
        let top = exhaustive_topk(&m, &[], 2, 2).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].tokens, vec![a]);
        assert!(top[0].finished);
        assert!((top[0].base_score - 0.6f64.ln()).abs() < 1e-12);
        assert_eq!(top[1].tokens, vec![b]);
        assert!((top[1].base_score - 0.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn topk_single_path_chain() {
        // Deterministic chain: x -> y -> EOS.
        let m = TableModel::builder(["x", "y"])
            .rule(&[], &[("x", 1.0)])
            .rule(&["x"], &[("y", 1.0)])
            .rule(&["x", "y"], &[(Vocabulary::EOS, 1.0)])
            .build()
            .unwrap();
        let v = m.vocabulary();
        let top = exhaustive_topk(&m, &[], 3, 1).unwrap();
        assert_eq!(top[0].tokens, vec![v.id_of("x").unwrap(), v.id_of("y").unwrap()]);
        assert!(top[0].finished);
        assert!(top[0].base_score.abs() < 1e-9);
    }

    #[test]
    fn topk_scores_agree_with_rescoring() {
        let m = random_table_model(5, &["a", "b", "c"], 2);
        let top = exhaustive_topk(&m, &[], 3, 10).unwrap();
        for h in &top {
            let rescored = score_sequence(&m, &[], &h.tokens, h.finished).unwrap();
            assert!((rescored - h.base_score).abs() < 1e-9);
        }
    }

    #[test]
    fn budget_refusal() {
        let corpus = random_ngram_corpus(3, &["a", "b", "c", "d", "e", "f"], 20, 6);
        let m = crate::model::NgramModel::from_corpus(&corpus, 2, 0.5).unwrap();
        // V = 9, so 9^7 > 1e6.
        let err = exhaustive_topk(&m, &[], 7, 5).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn sampling_distribution_one_step_is_step_distribution() {
        let m = two_choice_table();
        let v = m.vocabulary();
        let a = v.id_of("A").unwrap();
        let b = v.id_of("B").unwrap();
        let dist = exact_sampling_distribution(&m, &[], 2).unwrap();
        assert!((dist.probability_of(&[a]) - 0.6).abs() < 1e-12);
        assert!((dist.probability_of(&[b]) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_two_step_products() {
        // Hand-multiplied chain with branching.
        let m = TableModel::builder(["a", "b"])
            .rule(&[], &[("a", 0.7), ("b", 0.3)])
            .rule(&["a"], &[("b", 0.5), (Vocabulary::EOS, 0.5)])
            .rule(&["b"], &[(Vocabulary::EOS, 1.0)])
            .rule(&["a", "b"], &[(Vocabulary::EOS, 1.0)])
            .build()
            .unwrap();
        let v = m.vocabulary();
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        let dist = exact_sampling_distribution(&m, &[], 3).unwrap();
        assert!((dist.probability_of(&[a]) - 0.35).abs() < 1e-12);
        assert!((dist.probability_of(&[b]) - 0.3).abs() < 1e-12);
        assert!((dist.probability_of(&[a, b]) - 0.35).abs() < 1e-12);
    }

    #[test]
    fn sampling_distribution_mass_accounts_to_one() {
        for seed in 0..5 {
            let m = random_table_model(seed, &["a", "b", "c"], 3);
            let dist = exact_sampling_distribution(&m, &[], 3).unwrap();
            assert!(
                (dist.total_mass() - 1.0).abs() < 1e-9,
                "seed {seed}: mass {}",
                dist.total_mass()
            );
        }
    }

    #[test]
    fn naive_metrics_hand_values() {
        // "a b" / "a c" as ids.
        let candidates = vec![vec![0, 1], vec![0, 2]];
        assert!((naive_dist_k(&candidates, 1) - 0.75).abs() < 1e-12);
        let repeated = vec![vec![0, 0], vec![0, 0]];
        assert!((naive_dist_k(&repeated, 1) - 0.25).abs() < 1e-12);
        // Frequencies {ab: 2, cd: 1}.
        let ent_input = vec![vec![10, 11], vec![10, 11], vec![12, 13]];
        let expected = 3f64.ln() - (2.0 / 3.0) * 2f64.ln();
        assert!((naive_ent_k(&ent_input, 2) - expected).abs() < 1e-12);
    }

    #[test]
    fn random_table_model_is_seed_stable() {
        let a = random_table_model(9, &["a", "b"], 1);
        let b = random_table_model(9, &["a", "b"], 1);
        assert_eq!(a.step(&[], &[]).unwrap(), b.step(&[], &[]).unwrap());
        let c = random_table_model(10, &["a", "b"], 1);
        assert_ne!(a.step(&[], &[]).unwrap(), c.step(&[], &[]).unwrap());
    }
}
