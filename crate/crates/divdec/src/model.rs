//! Conditional sequence models.
//!
//! Every decoder in this crate consumes the same [`ConditionalModel`]
//! contract: given a prompt and the tokens generated so far, produce a
//! vector of next-token scores over a fixed [`Vocabulary`]. Two fully
//! deterministic reference models implement it:
//!
//! * [`TableModel`] — explicit conditional probabilities keyed by the
//!   generated prefix; the substrate for hand-built fixtures and for the
//!   exhaustive oracles.
//! * [`NgramModel`] — an order-`n` model with additive smoothing trained
//!   from a line-delimited corpus; the substrate for desk-scale
//!   experiments.
//!
//! Both models are immutable after construction and declare their
//! pre-softmax score vector as the perturbable state used by noisy
//! decoding, so additive noise lands upstream of the softmax.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Integer id of a vocabulary token.
pub type TokenId = u32;

/// Probability assigned to table entries that are not listed for a prefix.
/// Keeps every logit finite while leaving listed probabilities untouched at
/// f64 precision (`p / (p_total + V * FLOOR)` rounds to `p`).
const TABLE_PROB_FLOOR: f64 = 1e-300;

/// Tolerance for "probabilities sum to one" checks.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// A fixed, ordered token inventory with reserved sequence markers.
///
/// Ids `0..size()` biject onto token strings. The first three ids are always
/// the reserved markers [`Vocabulary::BOS`], [`Vocabulary::EOS`] and
/// [`Vocabulary::UNK`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const BOS: &'static str = "<bos>";
    pub const EOS: &'static str = "<eos>";
    pub const UNK: &'static str = "<unk>";

    /// Build a vocabulary from content tokens, in the given order, after the
    /// three reserved markers. Fails on duplicates, reserved-marker
    /// collisions, or tokens containing whitespace.
    pub fn from_content_tokens<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> =
            vec![Self::BOS.to_string(), Self::EOS.to_string(), Self::UNK.to_string()];
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for token in content {
            let token = token.into();
            if token.is_empty() || token.chars().any(char::is_whitespace) {
                return Err(Error::validation(format!(
                    "token {token:?} is empty or contains whitespace"
                )));
            }
            if index.contains_key(&token) {
                return Err(Error::validation(format!("duplicate token {token:?}")));
            }
            index.insert(token.clone(), tokens.len() as TokenId);
            tokens.push(token);
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> TokenId {
        0
    }

    pub fn eos(&self) -> TokenId {
        1
    }

    pub fn unk(&self) -> TokenId {
        2
    }

    pub fn is_valid(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to the unknown marker.
    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id_of(token).unwrap_or_else(|| self.unk())
    }

    pub fn token_str(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::validation(format!("token id {id} out of range")))
    }

    /// Whitespace-split `text` and map each token to an id (unknowns → UNK).
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|t| self.id_or_unk(t)).collect()
    }

    /// Render ids as a space-joined string.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token_str(id)?);
        }
        Ok(out)
    }

    /// Ids of the non-reserved tokens, in vocabulary order.
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (3..self.tokens.len()).map(|i| i as TokenId)
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        for &id in ids {
            if !self.is_valid(id) {
                return Err(Error::validation(format!(
                    "token id {id} out of range for vocabulary of size {}",
                    self.size()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Step distribution
// ---------------------------------------------------------------------------

/// Unnormalized next-token scores produced by one model step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    logits: Vec<f64>,
}

impl StepDistribution {
    /// Wrap raw scores; every entry must be finite.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::validation("empty logit vector"));
        }
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite logit {bad}")));
        }
        Ok(StepDistribution { logits })
    }

    /// Build from probabilities by taking natural logs. Zero probabilities
    /// are floored so the logits stay finite.
    pub fn from_probabilities(probs: &[f64]) -> Result<Self> {
        let logits = probs
            .iter()
            .map(|&p| {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::validation(format!("invalid probability {p}")));
                }
                Ok(p.max(TABLE_PROB_FLOOR).ln())
            })
            .collect::<Result<Vec<f64>>>()?;
        StepDistribution::from_logits(logits)
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Softmax of the logits (temperature 1), computed with max-subtraction.
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Log-softmax of the logits.
    pub fn log_probabilities(&self) -> Vec<f64> {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = self.logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        self.logits.iter().map(|&z| z - log_sum).collect()
    }

    /// Natural log probability of one token under the softmax.
    pub fn log_probability_of(&self, id: TokenId) -> f64 {
        self.log_probabilities()[id as usize]
    }

    /// Highest-probability token id; ties break toward the lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &z) in self.logits.iter().enumerate().skip(1) {
            if z > self.logits[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

// ---------------------------------------------------------------------------
// Model contract
// ---------------------------------------------------------------------------

/// The conditional-sequence-model contract consumed by every decoder.
///
/// `step` must be a pure function of `(prompt, prefix)`: repeated calls with
/// identical arguments return identical logits. Models are immutable after
/// construction, so shared references can be used concurrently.
pub trait ConditionalModel {
    fn vocabulary(&self) -> &Vocabulary;

    /// Next-token scores given the prompt and the tokens generated so far.
    fn step(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<StepDistribution>;

    /// Dimension of the internal state vector that accepts additive noise,
    /// or `None` when the model cannot be perturbed. The reference models
    /// expose their pre-softmax score vector, so the dimension equals the
    /// vocabulary size.
    fn perturbable_dim(&self) -> Option<usize> {
        None
    }

    /// Step with `noise` added to the perturbable state. An all-zero noise
    /// vector reproduces `step` exactly.
    fn perturbed_step(
        &self,
        prompt: &[TokenId],
        prefix: &[TokenId],
        noise: &[f64],
    ) -> Result<StepDistribution> {
        let dim = self.perturbable_dim().ok_or_else(|| {
            Error::Capability("model does not accept state perturbation".into())
        })?;
        if noise.len() != dim {
            return Err(Error::validation(format!(
                "noise dimension {} does not match perturbable dimension {dim}",
                noise.len()
            )));
        }
        let base = self.step(prompt, prefix)?;
        let logits = base
            .logits()
            .iter()
            .zip(noise)
            .map(|(&z, &e)| z + e)
            .collect();
        StepDistribution::from_logits(logits)
    }
}

/// Natural-log likelihood of a token sequence under `model`, including the
/// EOS transition when `finished` is set. This is the re-scoring route used
/// to validate every decoder's stored scores.
pub fn score_sequence<M: ConditionalModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    tokens: &[TokenId],
    finished: bool,
) -> Result<f64> {
    let mut total = 0.0;
    for t in 0..tokens.len() {
        let dist = model.step(prompt, &tokens[..t])?;
        total += dist.log_probability_of(tokens[t]);
    }
    if finished {
        let dist = model.step(prompt, tokens)?;
        total += dist.log_probability_of(model.vocabulary().eos());
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Table model
// ---------------------------------------------------------------------------

/// A model defined by explicit conditional probability entries keyed by the
/// generated prefix. Prefixes without an entry put all mass on UNK, and
/// tokens not listed for a prefix receive a floor probability so logits stay
/// finite. The prompt argument is ignored: tables condition on the decode
/// prefix alone.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: Vocabulary,
    rows: HashMap<Vec<TokenId>, Vec<(TokenId, f64)>>,
}

impl TableModel {
    pub fn builder<S: Into<String>>(content_tokens: impl IntoIterator<Item = S>) -> TableModelBuilder {
        TableModelBuilder {
            content: content_tokens.into_iter().map(Into::into).collect(),
            rules: Vec::new(),
        }
    }

    /// Parse the line-oriented table format:
    ///
    /// ```text
    /// # comment
    /// <bos>   | A 0.6
    /// <bos> A | <eos> 1.0
    /// ```
    ///
    /// The prefix column always starts at `<bos>`; probabilities listed for
    /// one prefix must sum to one.
    pub fn from_spec_text(text: &str) -> Result<Self> {
        let mut raw_rules: Vec<(usize, Vec<String>, String, f64)> = Vec::new();
        let mut names: BTreeSet<String> = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (lhs, rhs) = line.split_once('|').ok_or_else(|| Error::Parse {
                line: lineno,
                message: "expected `prefix | token probability`".into(),
            })?;
            let mut prefix: Vec<String> = lhs.split_whitespace().map(str::to_string).collect();
            if prefix.first().map(String::as_str) != Some(Vocabulary::BOS) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("prefix must start with {}", Vocabulary::BOS),
                });
            }
            prefix.remove(0);
            let mut parts = rhs.split_whitespace();
            let token = parts.next().ok_or_else(|| Error::Parse {
                line: lineno,
                message: "missing next token".into(),
            })?;
            let prob_text = parts.next().ok_or_else(|| Error::Parse {
                line: lineno,
                message: "missing probability".into(),
            })?;
            if parts.next().is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    message: "trailing content after probability".into(),
                });
            }
            let prob: f64 = prob_text.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid probability {prob_text:?}"),
            })?;
            for tok in prefix.iter().chain(std::iter::once(&token.to_string())) {
                if ![Vocabulary::BOS, Vocabulary::EOS, Vocabulary::UNK].contains(&tok.as_str()) {
                    names.insert(tok.clone());
                }
            }
            raw_rules.push((lineno, prefix, token.to_string(), prob));
        }
        if raw_rules.is_empty() {
            return Err(Error::validation("table spec lists no entries"));
        }

        let vocab = Vocabulary::from_content_tokens(names)?;
        let mut rows: HashMap<Vec<TokenId>, Vec<(TokenId, f64)>> = HashMap::new();
        for (lineno, prefix, token, prob) in raw_rules {
            if !(prob.is_finite() && (0.0..=1.0).contains(&prob)) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("probability {prob} outside [0, 1]"),
                });
            }
            let prefix_ids: Vec<TokenId> = prefix.iter().map(|t| vocab.id_or_unk(t)).collect();
            let token_id = vocab.id_or_unk(&token);
            rows.entry(prefix_ids).or_default().push((token_id, prob));
        }
        Self::from_rows(vocab, rows)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_spec_text(&text)
    }

    fn from_rows(
        vocab: Vocabulary,
        rows: HashMap<Vec<TokenId>, Vec<(TokenId, f64)>>,
    ) -> Result<Self> {
        for (prefix, entries) in &rows {
            let mut seen = BTreeSet::new();
            for (id, _) in entries {
                if !seen.insert(*id) {
                    return Err(Error::validation(format!(
                        "duplicate entry for token {id} under prefix {prefix:?}"
                    )));
                }
            }
            let total: f64 = entries.iter().map(|(_, p)| p).sum();
            if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
                return Err(Error::validation(format!(
                    "probabilities for prefix {prefix:?} sum to {total}, expected 1"
                )));
            }
        }
        Ok(TableModel { vocab, rows })
    }

    /// Serialize back to the table spec format.
    pub fn to_spec_text(&self) -> String {
        let mut keys: Vec<&Vec<TokenId>> = self.rows.keys().collect();
        keys.sort();
        let mut out = String::new();
        for prefix in keys {
            let mut lhs = Vocabulary::BOS.to_string();
            for &id in prefix {
                lhs.push(' ');
                lhs.push_str(self.vocab.token_str(id).expect("valid id"));
            }
            let mut entries = self.rows[prefix].clone();
            entries.sort_by_key(|(id, _)| *id);
            for (id, p) in entries {
                let _ = writeln!(
                    out,
                    "{lhs} | {} {p}",
                    self.vocab.token_str(id).expect("valid id")
                );
            }
        }
        out
    }
}

/// Incremental construction of a [`TableModel`] from string rules.
pub struct TableModelBuilder {
    content: Vec<String>,
    rules: Vec<(Vec<String>, Vec<(String, f64)>)>,
}

impl TableModelBuilder {
    /// Add the conditional distribution for one prefix (content tokens only;
    /// use [`Vocabulary::EOS`] to terminate).
    pub fn rule(mut self, prefix: &[&str], next: &[(&str, f64)]) -> Self {
        self.rules.push((
            prefix.iter().map(|s| s.to_string()).collect(),
            next.iter().map(|(t, p)| (t.to_string(), *p)).collect(),
        ));
        self
    }

    pub fn build(self) -> Result<TableModel> {
        let vocab = Vocabulary::from_content_tokens(self.content)?;
        let mut rows: HashMap<Vec<TokenId>, Vec<(TokenId, f64)>> = HashMap::new();
        for (prefix, entries) in self.rules {
            let prefix_ids: Vec<TokenId> = prefix
                .iter()
                .map(|t| {
                    vocab
                        .id_of(t)
                        .ok_or_else(|| Error::validation(format!("unknown prefix token {t:?}")))
                })
                .collect::<Result<_>>()?;
            let row = rows.entry(prefix_ids).or_default();
            for (token, p) in entries {
                let id = vocab
                    .id_of(&token)
                    .ok_or_else(|| Error::validation(format!("unknown token {token:?}")))?;
                row.push((id, p));
            }
        }
        TableModel::from_rows(vocab, rows)
    }
}

impl ConditionalModel for TableModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn step(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<StepDistribution> {
        self.vocab.check_ids(prompt)?;
        self.vocab.check_ids(prefix)?;
        let mut probs = vec![0.0; self.vocab.size()];
        match self.rows.get(prefix) {
            Some(entries) => {
                for &(id, p) in entries {
                    probs[id as usize] = p;
                }
            }
            None => probs[self.vocab.unk() as usize] = 1.0,
        }
        StepDistribution::from_probabilities(&probs)
    }

    fn perturbable_dim(&self) -> Option<usize> {
        Some(self.vocab.size())
    }
}

// ---------------------------------------------------------------------------
// N-gram model
// ---------------------------------------------------------------------------

/// Order-`n` conditional model with additive smoothing:
///
/// `P(w | h) = (count(h·w) + alpha) / (count(h) + alpha·V)`
///
/// where `h` is the last `n-1` tokens of the BOS-padded context. Counts are
/// collected from each corpus line's tokens; the line framing contributes
/// BOS padding on the left and an EOS terminator whose probability comes
/// from the smoothing mass. Generation conditions on the concatenation of
/// the prompt and the decoded prefix, so prompts act as seed context.
#[derive(Debug, Clone)]
pub struct NgramModel {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    counts: HashMap<Vec<TokenId>, ContextCounts>,
}

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    by_token: BTreeMap<TokenId, u64>,
    total: u64,
}

impl NgramModel {
    /// Train from line-delimited text. Tokenization is whitespace splitting
    /// with case preserved; blank lines are skipped.
    pub fn from_corpus(text: &str, order: usize, alpha: f64) -> Result<Self> {
        if order < 1 {
            return Err(Error::validation(format!("order {order} must be >= 1")));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::validation(format!("alpha {alpha} must be > 0")));
        }
        let lines: Vec<Vec<&str>> = text
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>())
            .filter(|toks| !toks.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(Error::validation("corpus contains no non-empty lines"));
        }

        let mut token_set: BTreeSet<&str> = BTreeSet::new();
        for line in &lines {
            token_set.extend(line.iter().copied());
        }
        let vocab = Vocabulary::from_content_tokens(token_set)?;

        let mut counts: HashMap<Vec<TokenId>, ContextCounts> = HashMap::new();
        for line in &lines {
            let ids: Vec<TokenId> = line.iter().map(|t| vocab.id_or_unk(t)).collect();
            for (i, &w) in ids.iter().enumerate() {
                let ctx = padded_context(vocab.bos(), &ids[..i], order);
                let entry = counts.entry(ctx).or_default();
                *entry.by_token.entry(w).or_insert(0) += 1;
                entry.total += 1;
            }
        }
        Ok(NgramModel { vocab, order, alpha, counts })
    }

    pub fn from_corpus_file(path: impl AsRef<Path>, order: usize, alpha: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_corpus(&text, order, alpha)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Smoothed conditional probability of `token` after `context` (the
    /// context is padded/truncated to the model order internally).
    pub fn conditional(&self, context: &[TokenId], token: TokenId) -> f64 {
        let ctx = padded_context(self.vocab.bos(), context, self.order);
        let v = self.vocab.size() as f64;
        match self.counts.get(&ctx) {
            Some(c) => {
                let k = c.by_token.get(&token).copied().unwrap_or(0) as f64;
                (k + self.alpha) / (c.total as f64 + self.alpha * v)
            }
            None => 1.0 / v,
        }
    }
}

/// Last `order - 1` tokens of the BOS-padded history.
fn padded_context(bos: TokenId, history: &[TokenId], order: usize) -> Vec<TokenId> {
    let need = order - 1;
    let mut ctx = Vec::with_capacity(need);
    for i in 0..need {
        let pos = history.len() as i64 - need as i64 + i as i64;
        ctx.push(if pos < 0 { bos } else { history[pos as usize] });
    }
    ctx
}

impl ConditionalModel for NgramModel {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn step(&self, prompt: &[TokenId], prefix: &[TokenId]) -> Result<StepDistribution> {
        self.vocab.check_ids(prompt)?;
        self.vocab.check_ids(prefix)?;
        let mut history = Vec::with_capacity(prompt.len() + prefix.len());
        history.extend_from_slice(prompt);
        history.extend_from_slice(prefix);
        let ctx = padded_context(self.vocab.bos(), &history, self.order);
        let v = self.vocab.size() as f64;
        let logits = match self.counts.get(&ctx) {
            Some(c) => {
                let denom = c.total as f64 + self.alpha * v;
                (0..self.vocab.size() as TokenId)
                    .map(|id| {
                        let k = c.by_token.get(&id).copied().unwrap_or(0) as f64;
                        ((k + self.alpha) / denom).ln()
                    })
                    .collect()
            }
            None => vec![(1.0 / v).ln(); self.vocab.size()],
        };
        StepDistribution::from_logits(logits)
    }

    fn perturbable_dim(&self) -> Option<usize> {
        Some(self.vocab.size())
    }
}
