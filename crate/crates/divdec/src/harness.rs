//! Experiment harness: declarative sweep configs, seeded decoding over a
//! prompt set, candidate persistence, and metric reports.
//!
//! A run is a pure function of `(config, seed)`. Prompt `p` decoded with
//! strategy `s` uses the seed `mix(mix(global, p), s)`, so adding a
//! strategy to a sweep never perturbs the outputs of the others.
//!
//! ## Files written by a sweep
//!
//! * `candidates.txt` — final outputs, one per line:
//!   `prompt_id strategy rank score finished token_sequence`
//! * `pool.txt` — the full oversampled pools for strategies that filter,
//!   same line format;
//! * `report.jsonl` — one JSON object per prompt × strategy with metrics
//!   and candidates;
//! * `summary.tsv` — per-strategy metric means (the comparison table);
//! * `provenance.json` — config hash, seed, package version.
//!
//! None of the files carry timestamps: two runs with the same config and
//! seed are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::beam::{beam_search, iterative_beam_search, BeamConfig, BeamVariant};
use crate::candidate::{CandidateSet, ScoredHypothesis};
use crate::cluster::{pdc_filter, EmbeddingProvider, SequenceEmbedder, WordVectorEmbedder};
use crate::error::{Error, Result};
use crate::metrics::{compute_report, MetricSpec};
use crate::model::{ConditionalModel, NgramModel, TableModel, TokenId, Vocabulary};
use crate::rng::mix_seed;
use crate::sampler::{greedy_decode, sample_candidates, SamplerConfig};

const PDC_SEED_SALT: u64 = 0x7064_6300; // distinct substream for filtering

// ---------------------------------------------------------------------------
// Strategy configuration
// ---------------------------------------------------------------------------

/// Beam variant as plain configuration data (the runtime embedder for the
/// clustered variant is attached when decoding starts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VariantSpec {
    Standard,
    TopGCap { g: usize },
    Hamming { lambda: f64 },
    Npad { sigma0: f64 },
    Clustered { clusters: usize },
}

/// How a strategy generates its candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StrategyKind {
    Greedy,
    Sample { temperature: f64, top_s: Option<usize>, num_samples: usize },
    Beam { beam_width: usize, variant: VariantSpec },
    IterativeBeam { beam_width: usize, iterations: usize },
}

/// Optional oversample-then-filter stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FilterMode {
    None,
    /// Keep the `target` highest-likelihood candidates.
    Rank { target: usize },
    /// Post-decoding clustering down to `target`; `clusters` defaults to
    /// `target`.
    Pdc { target: usize, clusters: Option<usize> },
}

/// One named decoding strategy in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub name: String,
    pub kind: StrategyKind,
    pub filter: FilterMode,
}

impl StrategyConfig {
    /// Size of the pool the generation phase produces.
    pub fn pool_size(&self) -> usize {
        match &self.kind {
            StrategyKind::Greedy => 1,
            StrategyKind::Sample { num_samples, .. } => *num_samples,
            StrategyKind::Beam { beam_width, .. } => *beam_width,
            StrategyKind::IterativeBeam { beam_width, iterations } => beam_width * iterations,
        }
    }

    /// Number of candidates the strategy finally reports.
    pub fn target_count(&self) -> usize {
        match &self.filter {
            FilterMode::None => match &self.kind {
                // An iterative pool holds up to b*iterations candidates but
                // the strategy reports b outputs, like the other beams.
                StrategyKind::IterativeBeam { beam_width, .. } => *beam_width,
                _ => self.pool_size(),
            },
            FilterMode::Rank { target } => *target,
            FilterMode::Pdc { target, .. } => *target,
        }
    }

    /// Whether the strategy generates a larger pool and filters it down.
    pub fn oversamples(&self) -> bool {
        !matches!(self.filter, FilterMode::None)
    }

    fn needs_embedder(&self) -> bool {
        matches!(self.filter, FilterMode::Pdc { .. })
            || matches!(
                self.kind,
                StrategyKind::Beam { variant: VariantSpec::Clustered { .. }, .. }
            )
    }

    fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '+'))
        {
            return Err(Error::config(format!(
                "strategy name {:?} must be non-empty and use only [A-Za-z0-9._+-]",
                self.name
            )));
        }
        let target = self.target_count();
        if target < 1 {
            return Err(Error::config(format!("{}: target must be >= 1", self.name)));
        }
        if self.pool_size() < target {
            return Err(Error::config(format!(
                "{}: pool of {} cannot supply {} outputs",
                self.name,
                self.pool_size(),
                target
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Ngram { corpus: PathBuf, order: usize, alpha: f64, char_level: bool },
    Table { spec: PathBuf },
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub prompts: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub max_len: usize,
    pub model: ModelSpec,
    pub word_vectors: Option<PathBuf>,
    pub metrics: MetricSpec,
    pub strategies: Vec<StrategyConfig>,
    /// Hash of the config source, carried into report provenance.
    pub fingerprint: String,
}

// Serde mirror of the TOML sweep file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    prompts: String,
    output_dir: Option<String>,
    max_len: usize,
    model: RawModel,
    embeddings: Option<RawEmbeddings>,
    metrics: Option<RawMetrics>,
    #[serde(rename = "strategy")]
    strategies: Vec<RawStrategy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    kind: String,
    corpus: Option<String>,
    order: Option<usize>,
    alpha: Option<f64>,
    char_level: Option<bool>,
    spec: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEmbeddings {
    word_vectors: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMetrics {
    dist: Option<Vec<usize>>,
    ent: Option<Vec<usize>>,
    perplexity: Option<bool>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStrategy {
    name: String,
    kind: String,
    temperature: Option<f64>,
    top_s: Option<usize>,
    num_samples: Option<usize>,
    beam_width: Option<usize>,
    variant: Option<String>,
    g: Option<usize>,
    lambda: Option<f64>,
    sigma0: Option<f64>,
    clusters: Option<usize>,
    iterations: Option<usize>,
    oversample: Option<String>,
    target: Option<usize>,
    pdc_clusters: Option<usize>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl ExperimentConfig {
    /// Parse a sweep config file. Relative paths inside the file resolve
    /// against the file's own directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("bad sweep config: {e}")))?;
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base_dir.join(p)
            }
        };

        let model = match raw.model.kind.as_str() {
            "ngram" => ModelSpec::Ngram {
                corpus: resolve(
                    raw.model
                        .corpus
                        .as_deref()
                        .ok_or_else(|| Error::config("ngram model requires `corpus`"))?,
                ),
                order: raw.model.order.unwrap_or(3),
                alpha: raw.model.alpha.unwrap_or(0.1),
                char_level: raw.model.char_level.unwrap_or(false),
            },
            "table" => ModelSpec::Table {
                spec: resolve(
                    raw.model
                        .spec
                        .as_deref()
                        .ok_or_else(|| Error::config("table model requires `spec`"))?,
                ),
            },
            other => return Err(Error::config(format!("unknown model kind {other:?}"))),
        };

        let metrics = match raw.metrics {
            Some(m) => MetricSpec {
                dist_ks: m.dist.unwrap_or_else(|| vec![1, 2]),
                ent_ks: m.ent.unwrap_or_else(|| vec![2, 4]),
                perplexity: m.perplexity.unwrap_or(true),
            },
            None => MetricSpec::default(),
        };

        let strategies = raw
            .strategies
            .into_iter()
            .map(parse_strategy)
            .collect::<Result<Vec<_>>>()?;

        let config = ExperimentConfig {
            seed: raw.seed.unwrap_or(0),
            prompts: resolve(&raw.prompts),
            output_dir: raw.output_dir.as_deref().map(resolve),
            max_len: raw.max_len,
            model,
            word_vectors: raw.embeddings.map(|e| resolve(&e.word_vectors)),
            metrics,
            strategies,
            fingerprint: format!("{:016x}", fnv1a64(text.as_bytes())),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_len < 1 {
            return Err(Error::config("max_len must be >= 1"));
        }
        if self.strategies.is_empty() {
            return Err(Error::config("no strategies configured"));
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.strategies {
            s.validate()?;
            if !names.insert(&s.name) {
                return Err(Error::config(format!("duplicate strategy name {:?}", s.name)));
            }
            if s.needs_embedder() && self.word_vectors.is_none() {
                return Err(Error::config(format!(
                    "{}: clustered/pdc strategies need [embeddings].word_vectors",
                    s.name
                )));
            }
        }
        Ok(())
    }
}

fn parse_strategy(raw: RawStrategy) -> Result<StrategyConfig> {
    let kind = match raw.kind.as_str() {
        "greedy" => StrategyKind::Greedy,
        "sample" => StrategyKind::Sample {
            temperature: raw.temperature.unwrap_or(1.0),
            top_s: raw.top_s,
            num_samples: raw
                .num_samples
                .ok_or_else(|| Error::config(format!("{}: sample needs num_samples", raw.name)))?,
        },
        "beam" => {
            let beam_width = raw
                .beam_width
                .ok_or_else(|| Error::config(format!("{}: beam needs beam_width", raw.name)))?;
            let variant = match raw.variant.as_deref().unwrap_or("standard") {
                "standard" => VariantSpec::Standard,
                "top_g" => VariantSpec::TopGCap {
                    g: raw.g.ok_or_else(|| Error::config(format!("{}: top_g needs g", raw.name)))?,
                },
                "hamming" => VariantSpec::Hamming {
                    lambda: raw
                        .lambda
                        .ok_or_else(|| Error::config(format!("{}: hamming needs lambda", raw.name)))?,
                },
                "npad" => VariantSpec::Npad {
                    sigma0: raw
                        .sigma0
                        .ok_or_else(|| Error::config(format!("{}: npad needs sigma0", raw.name)))?,
                },
                "clustered" => VariantSpec::Clustered {
                    clusters: raw.clusters.ok_or_else(|| {
                        Error::config(format!("{}: clustered needs clusters", raw.name))
                    })?,
                },
                other => {
                    return Err(Error::config(format!(
                        "{}: unknown beam variant {other:?}",
                        raw.name
                    )))
                }
            };
            StrategyKind::Beam { beam_width, variant }
        }
        "iterative_beam" => StrategyKind::IterativeBeam {
            beam_width: raw.beam_width.ok_or_else(|| {
                Error::config(format!("{}: iterative_beam needs beam_width", raw.name))
            })?,
            iterations: raw.iterations.ok_or_else(|| {
                Error::config(format!("{}: iterative_beam needs iterations", raw.name))
            })?,
        },
        other => return Err(Error::config(format!("unknown strategy kind {other:?}"))),
    };

    let filter = match raw.oversample.as_deref().unwrap_or("none") {
        "none" => FilterMode::None,
        "rank" => FilterMode::Rank {
            target: raw
                .target
                .ok_or_else(|| Error::config(format!("{}: rank filter needs target", raw.name)))?,
        },
        "pdc" => FilterMode::Pdc {
            target: raw
                .target
                .ok_or_else(|| Error::config(format!("{}: pdc filter needs target", raw.name)))?,
            clusters: raw.pdc_clusters,
        },
        other => return Err(Error::config(format!("{}: unknown oversample {other:?}", raw.name))),
    };

    Ok(StrategyConfig { name: raw.name, kind, filter })
}

// ---------------------------------------------------------------------------
// Loaded experiment
// ---------------------------------------------------------------------------

/// A model plus everything decoded prompts need from it.
pub enum LoadedModel {
    Ngram(NgramModel),
    Table(TableModel),
}

impl LoadedModel {
    pub fn as_dyn(&self) -> &dyn ConditionalModel {
        match self {
            LoadedModel::Ngram(m) => m,
            LoadedModel::Table(m) => m,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        self.as_dyn().vocabulary()
    }
}

/// Config with every referenced file loaded and validated, ready to decode.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: LoadedModel,
    pub prompts: Vec<String>,
    pub embedder: Option<Arc<dyn SequenceEmbedder>>,
    char_level: bool,
}

/// Spell a line as space-separated character tokens, whitespace as `_`.
pub fn char_tokens(line: &str) -> String {
    let mut out = String::with_capacity(line.len() * 2);
    for (i, ch) in line.chars().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push(if ch.is_whitespace() { '_' } else { ch });
    }
    out
}

impl Experiment {
    /// Load model, prompts and embeddings; every validation failure
    /// surfaces here, before any decoding starts.
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let char_level = matches!(
            config.model,
            ModelSpec::Ngram { char_level: true, .. }
        );
        let model = match &config.model {
            ModelSpec::Ngram { corpus, order, alpha, char_level } => {
                let text = std::fs::read_to_string(corpus)?;
                let text = if *char_level {
                    let mut spelled = String::with_capacity(text.len() * 2);
                    for line in text.lines() {
                        spelled.push_str(&char_tokens(line));
                        spelled.push('\n');
                    }
                    spelled
                } else {
                    text
                };
                LoadedModel::Ngram(NgramModel::from_corpus(&text, *order, *alpha)?)
            }
            ModelSpec::Table { spec } => LoadedModel::Table(TableModel::from_file(spec)?),
        };
        let prompts: Vec<String> =
            std::fs::read_to_string(&config.prompts)?.lines().map(str::to_string).collect();
        if prompts.is_empty() {
            return Err(Error::config("prompts file is empty"));
        }
        let embedder: Option<Arc<dyn SequenceEmbedder>> = match &config.word_vectors {
            Some(path) => {
                let provider = EmbeddingProvider::from_file(path)?;
                Some(Arc::new(WordVectorEmbedder::new(
                    provider,
                    model.vocabulary().clone(),
                )))
            }
            None => None,
        };
        Ok(Experiment { config, model, prompts, embedder, char_level })
    }

    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let vocab = self.model.vocabulary();
        if self.char_level {
            vocab.encode(&char_tokens(text))
        } else {
            vocab.encode(text)
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding one prompt with one strategy
// ---------------------------------------------------------------------------

/// Pool and filtered outputs for one prompt × strategy cell.
#[derive(Debug, Clone)]
pub struct DecodeOutcome {
    /// The oversampled pool, present when the strategy filters.
    pub pool: Option<CandidateSet>,
    pub outputs: CandidateSet,
}

fn runtime_variant(
    spec: &VariantSpec,
    embedder: Option<&Arc<dyn SequenceEmbedder>>,
    strategy: &str,
) -> Result<BeamVariant> {
    Ok(match spec {
        VariantSpec::Standard => BeamVariant::Standard,
        VariantSpec::TopGCap { g } => BeamVariant::TopGCap { g: *g },
        VariantSpec::Hamming { lambda } => BeamVariant::Hamming { lambda: *lambda },
        VariantSpec::Npad { sigma0 } => BeamVariant::Npad { sigma0: *sigma0 },
        VariantSpec::Clustered { clusters } => BeamVariant::Clustered {
            clusters: *clusters,
            embedder: embedder
                .ok_or_else(|| {
                    Error::config(format!("{strategy}: clustered beam needs word vectors"))
                })?
                .clone(),
        },
    })
}

/// Decode one prompt with one strategy under one seed.
pub fn decode_prompt(
    model: &dyn ConditionalModel,
    prompt: &[TokenId],
    strategy: &StrategyConfig,
    max_len: usize,
    seed: u64,
    embedder: Option<&Arc<dyn SequenceEmbedder>>,
) -> Result<DecodeOutcome> {
    strategy.validate()?;
    let pool = match &strategy.kind {
        StrategyKind::Greedy => {
            CandidateSet::new(vec![greedy_decode(model, prompt, max_len)?])
        }
        StrategyKind::Sample { temperature, top_s, num_samples } => {
            let mut cfg = SamplerConfig::new(*temperature, *num_samples, max_len, seed);
            cfg.top_s = *top_s;
            sample_candidates(model, prompt, &cfg)?
        }
        StrategyKind::Beam { beam_width, variant } => {
            let cfg = BeamConfig::standard(*beam_width, max_len)
                .with_seed(seed)
                .with_variant(runtime_variant(variant, embedder, &strategy.name)?);
            beam_search(model, prompt, &cfg)?
        }
        StrategyKind::IterativeBeam { beam_width, iterations } => {
            iterative_beam_search(model, prompt, *beam_width, *iterations, max_len)?.candidates
        }
    };

    let outcome = match &strategy.filter {
        FilterMode::None => {
            let mut outputs = pool.clone();
            match strategy.kind {
                // Samplers report in generation order; searches by score.
                StrategyKind::Sample { .. } | StrategyKind::Greedy => {}
                _ => outputs.sort_by_base_score(),
            }
            outputs.truncate(strategy.target_count());
            DecodeOutcome { pool: None, outputs }
        }
        FilterMode::Rank { target } => {
            let mut outputs = pool.clone();
            outputs.sort_by_base_score();
            outputs.truncate(*target);
            DecodeOutcome { pool: Some(pool), outputs }
        }
        FilterMode::Pdc { target, clusters } => {
            let embedder = embedder.ok_or_else(|| {
                Error::config(format!("{}: pdc filter needs word vectors", strategy.name))
            })?;
            let k = clusters.unwrap_or(*target);
            let outputs = pdc_filter(
                &pool,
                *target,
                k,
                embedder.as_ref(),
                mix_seed(seed, PDC_SEED_SALT),
            )?;
            DecodeOutcome { pool: Some(pool), outputs }
        }
    };
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One persisted candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub rank: usize,
    pub score: f64,
    pub finished: bool,
    pub tokens: String,
}

/// Everything produced for one prompt × strategy cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRow {
    pub prompt_index: usize,
    pub prompt: String,
    pub strategy: String,
    pub metrics: BTreeMap<String, f64>,
    pub candidates: Vec<CandidateRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool: Option<Vec<CandidateRecord>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyAggregate {
    pub strategy: String,
    /// Mean of each per-prompt metric over all prompts.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub package_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<StrategyAggregate>,
}

impl RunReport {
    pub fn aggregate_for(&self, strategy: &str) -> Option<&StrategyAggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }
}

fn to_records(vocab: &Vocabulary, set: &CandidateSet) -> Result<Vec<CandidateRecord>> {
    set.iter()
        .enumerate()
        .map(|(i, h)| {
            Ok(CandidateRecord {
                rank: i + 1,
                score: h.base_score,
                finished: h.finished,
                tokens: vocab.decode(&h.tokens)?,
            })
        })
        .collect()
}

/// Run the full sweep: every strategy on every prompt, metrics per cell,
/// macro-averages per strategy.
pub fn run_experiment(experiment: &Experiment) -> Result<RunReport> {
    let config = &experiment.config;
    let model = experiment.model.as_dyn();
    let vocab = model.vocabulary();

    let mut rows: Vec<RunRow> = Vec::new();
    for (p_idx, prompt_text) in experiment.prompts.iter().enumerate() {
        let prompt_ids = experiment.encode_prompt(prompt_text);
        let prompt_seed = mix_seed(config.seed, p_idx as u64);
        for (s_idx, strategy) in config.strategies.iter().enumerate() {
            let seed = mix_seed(prompt_seed, s_idx as u64);
            let outcome = decode_prompt(
                model,
                &prompt_ids,
                strategy,
                config.max_len,
                seed,
                experiment.embedder.as_ref(),
            )?;
            let report = compute_report(model, &prompt_ids, &outcome.outputs, &config.metrics)?;
            rows.push(RunRow {
                prompt_index: p_idx,
                prompt: prompt_text.clone(),
                strategy: strategy.name.clone(),
                metrics: report.to_flat(),
                candidates: to_records(vocab, &outcome.outputs)?,
                pool: outcome.pool.as_ref().map(|p| to_records(vocab, p)).transpose()?,
            });
        }
    }

    let mut aggregates = Vec::new();
    for strategy in &config.strategies {
        let strategy_rows: Vec<&RunRow> =
            rows.iter().filter(|r| r.strategy == strategy.name).collect();
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for row in &strategy_rows {
            for (k, v) in &row.metrics {
                *sums.entry(k.clone()).or_insert(0.0) += v;
            }
        }
        let n = strategy_rows.len() as f64;
        let metrics = sums.into_iter().map(|(k, v)| (k, v / n)).collect();
        aggregates.push(StrategyAggregate { strategy: strategy.name.clone(), metrics });
    }

    Ok(RunReport {
        provenance: Provenance {
            config_hash: config.fingerprint.clone(),
            seed: config.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        rows,
        aggregates,
    })
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

fn record_line(prompt_index: usize, strategy: &str, r: &CandidateRecord) -> String {
    format!(
        "{} {} {} {} {} {}\n",
        prompt_index, strategy, r.rank, r.score, r.finished, r.tokens
    )
}

/// Write `candidates.txt`, `pool.txt`, `report.jsonl`, `summary.tsv` and
/// `provenance.json` into `dir`.
pub fn write_run_files(report: &RunReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut candidates = String::new();
    let mut pool = String::new();
    let mut jsonl = String::new();
    for row in &report.rows {
        for r in &row.candidates {
            candidates.push_str(&record_line(row.prompt_index, &row.strategy, r));
        }
        if let Some(rows) = &row.pool {
            for r in rows {
                pool.push_str(&record_line(row.prompt_index, &row.strategy, r));
            }
        }
        jsonl.push_str(
            &serde_json::to_string(row).map_err(|e| Error::config(e.to_string()))?,
        );
        jsonl.push('\n');
    }
    std::fs::write(dir.join("candidates.txt"), candidates)?;
    std::fs::write(dir.join("pool.txt"), pool)?;
    std::fs::write(dir.join("report.jsonl"), jsonl)?;
    std::fs::write(dir.join("summary.tsv"), compare_strategies(report, "strategy", false)?)?;
    let provenance = serde_json::to_string_pretty(&report.provenance)
        .map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(dir.join("provenance.json"), provenance + "\n")?;
    Ok(())
}

/// Candidates re-read from a `candidates.txt`-format file, grouped by
/// prompt and strategy in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub prompt_index: usize,
    pub strategy: String,
    pub records: Vec<CandidateRecord>,
}

pub fn parse_candidate_file(text: &str) -> Result<Vec<CandidateGroup>> {
    let mut groups: Vec<CandidateGroup> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(6, ' ');
        let mut field = |name: &str| {
            parts.next().ok_or_else(|| Error::Parse {
                line: lineno,
                message: format!("missing field {name}"),
            })
        };
        let prompt_index: usize = field("prompt_id")?.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "bad prompt_id".into(),
        })?;
        let strategy = field("strategy")?.to_string();
        let rank: usize = field("rank")?.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "bad rank".into(),
        })?;
        let score: f64 = field("score")?.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "bad score".into(),
        })?;
        let finished: bool = field("finished")?.parse().map_err(|_| Error::Parse {
            line: lineno,
            message: "bad finished flag".into(),
        })?;
        let tokens = parts.next().unwrap_or("").to_string();
        let record = CandidateRecord { rank, score, finished, tokens };
        match groups.last_mut() {
            Some(g) if g.prompt_index == prompt_index && g.strategy == strategy => {
                g.records.push(record)
            }
            _ => groups.push(CandidateGroup {
                prompt_index,
                strategy,
                records: vec![record],
            }),
        }
    }
    if groups.is_empty() {
        return Err(Error::validation("candidate file contains no records"));
    }
    Ok(groups)
}

/// Rebuild a scored candidate set from persisted records.
pub fn candidates_from_records(vocab: &Vocabulary, records: &[CandidateRecord]) -> CandidateSet {
    records
        .iter()
        .map(|r| ScoredHypothesis {
            tokens: vocab.encode(&r.tokens),
            score: r.score,
            base_score: r.score,
            finished: r.finished,
            parent_index: 0,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Summary table
// ---------------------------------------------------------------------------

const SUMMARY_COLUMNS: [&str; 6] = ["strategy", "ppl", "dist-1", "dist-2", "ent-2", "ent-4"];

/// Render the per-strategy comparison table (tab-separated), sorted by the
/// given column.
pub fn compare_strategies(report: &RunReport, sort_by: &str, descending: bool) -> Result<String> {
    if report.aggregates.len() < 2 && sort_by != "strategy" {
        return Err(Error::validation(
            "comparison requires at least two strategies",
        ));
    }
    if !SUMMARY_COLUMNS.contains(&sort_by) {
        return Err(Error::validation(format!(
            "unknown sort column {sort_by:?}; expected one of {SUMMARY_COLUMNS:?}"
        )));
    }

    let value = |agg: &StrategyAggregate, col: &str| -> Result<f64> {
        agg.metrics.get(col).copied().ok_or_else(|| {
            Error::validation(format!(
                "strategy {} has no metric {col:?}; add it to [metrics] in the config",
                agg.strategy
            ))
        })
    };

    let mut order: Vec<&StrategyAggregate> = report.aggregates.iter().collect();
    if sort_by == "strategy" {
        order.sort_by(|a, b| a.strategy.cmp(&b.strategy));
        if descending {
            order.reverse();
        }
    } else {
        for agg in &order {
            value(agg, sort_by)?;
        }
        order.sort_by(|a, b| {
            let va = value(a, sort_by).expect("checked");
            let vb = value(b, sort_by).expect("checked");
            if descending { vb.total_cmp(&va) } else { va.total_cmp(&vb) }
                .then_with(|| a.strategy.cmp(&b.strategy))
        });
    }

    let mut out = String::new();
    let _ = writeln!(out, "{}", SUMMARY_COLUMNS.join("\t"));
    for agg in order {
        let mut cells = vec![agg.strategy.clone()];
        for col in &SUMMARY_COLUMNS[1..] {
            cells.push(format!("{:.4}", value(agg, col)?));
        }
        let _ = writeln!(out, "{}", cells.join("\t"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::random_ngram_corpus;
    use crate::rng::CounterRng;
    use std::fs;

    fn write_fixture_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let corpus = random_ngram_corpus(5, &["red", "green", "blue", "dot", "line"], 40, 6);
        let corpus_path = dir.join("corpus.txt");
        fs::write(&corpus_path, corpus).unwrap();
        let prompts_path = dir.join("prompts.txt");
        fs::write(&prompts_path, "red dot\nblue\ngreen line\n").unwrap();
        let vectors_path = dir.join("vectors.txt");
        let mut rng = CounterRng::new(3);
        let mut vectors = String::new();
        for word in ["red", "green", "blue", "dot", "line"] {
            vectors.push_str(&format!(
                "{word} {:.4} {:.4} {:.4}\n",
                rng.next_gaussian(),
                rng.next_gaussian(),
                rng.next_gaussian()
            ));
        }
        fs::write(&vectors_path, vectors).unwrap();
        (corpus_path, prompts_path, vectors_path)
    }

    fn grid_config(dir: &Path) -> ExperimentConfig {
        let (corpus, prompts, vectors) = write_fixture_files(dir);
        let toml_text = format!(
            r#"
seed = 11
prompts = "{}"
max_len = 8

[model]
kind = "ngram"
corpus = "{}"
order = 2
alpha = 0.2

[embeddings]
word_vectors = "{}"

[metrics]
dist = [1, 2]
ent = [2, 4]
perplexity = true

[[strategy]]
name = "rs_t0.7"
kind = "sample"
temperature = 0.7
num_samples = 6

[[strategy]]
name = "rs_t1.0_top3"
kind = "sample"
temperature = 1.0
top_s = 3
num_samples = 6

[[strategy]]
name = "bs_standard"
kind = "beam"
beam_width = 6
variant = "standard"

[[strategy]]
name = "bs_top2cap"
kind = "beam"
beam_width = 6
variant = "top_g"
g = 2

[[strategy]]
name = "bs_ham0.8"
kind = "beam"
beam_width = 6
variant = "hamming"
lambda = 0.8

[[strategy]]
name = "bs_npad0.3"
kind = "beam"
beam_width = 6
variant = "npad"
sigma0 = 0.3

[[strategy]]
name = "bs_cluster3"
kind = "beam"
beam_width = 6
variant = "clustered"
clusters = 3

[[strategy]]
name = "bs_iter3"
kind = "iterative_beam"
beam_width = 4
iterations = 3

[[strategy]]
name = "rs_rank"
kind = "sample"
temperature = 1.0
num_samples = 20
oversample = "rank"
target = 5

[[strategy]]
name = "rs_pdc"
kind = "sample"
temperature = 1.0
num_samples = 20
oversample = "pdc"
target = 5
pdc_clusters = 5
"#,
            prompts.display(),
            corpus.display(),
            vectors.display()
        );
        ExperimentConfig::from_toml(&toml_text, dir).unwrap()
    }

    #[test]
    fn full_grid_runs_and_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config).unwrap();
        let report = run_experiment(&experiment).unwrap();

        // 3 prompts x 10 strategies.
        assert_eq!(report.rows.len(), 30);
        for row in &report.rows {
            let strategy = experiment
                .config
                .strategies
                .iter()
                .find(|s| s.name == row.strategy)
                .unwrap();
            assert_eq!(row.candidates.len(), strategy.target_count(), "{}", row.strategy);
            if strategy.oversamples() {
                let pool = row.pool.as_ref().expect("pool persisted");
                assert_eq!(pool.len(), strategy.pool_size());
            } else {
                assert!(row.pool.is_none());
            }
        }
        assert_eq!(report.aggregates.len(), 10);
    }

    #[test]
    fn aggregates_are_prompt_means() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config).unwrap();
        let report = run_experiment(&experiment).unwrap();
        for agg in &report.aggregates {
            let rows: Vec<&RunRow> =
                report.rows.iter().filter(|r| r.strategy == agg.strategy).collect();
            for (key, &mean) in &agg.metrics {
                let recomputed =
                    rows.iter().map(|r| r.metrics[key]).sum::<f64>() / rows.len() as f64;
                assert!((mean - recomputed).abs() < 1e-9, "{key}");
            }
        }
    }

    #[test]
    fn rank_filter_selection_recomputable_from_pool() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config).unwrap();
        let report = run_experiment(&experiment).unwrap();
        let vocab = experiment.model.vocabulary();
        for row in report.rows.iter().filter(|r| r.strategy == "rs_rank") {
            let pool = candidates_from_records(vocab, row.pool.as_ref().unwrap());
            let mut resorted = pool.clone();
            resorted.sort_by_base_score();
            let expect: Vec<(String, f64)> = resorted
                .iter()
                .take(5)
                .map(|h| (vocab.decode(&h.tokens).unwrap(), h.base_score))
                .collect();
            let got: Vec<(String, f64)> = row
                .candidates
                .iter()
                .map(|r| (r.tokens.clone(), r.score))
                .collect();
            assert_eq!(got, expect);
            // Outputs are a subset of the persisted pool.
            for r in &row.candidates {
                assert!(row.pool.as_ref().unwrap().iter().any(|p| p.tokens == r.tokens));
            }
        }
    }

    #[test]
    fn runs_are_deterministic_and_seed_sensitive() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config.clone()).unwrap();
        let a = run_experiment(&experiment).unwrap();
        let b = run_experiment(&experiment).unwrap();
        assert_eq!(serde_json::to_string(&a.rows).unwrap(), serde_json::to_string(&b.rows).unwrap());

        let mut reseeded_config = config;
        reseeded_config.seed = 12;
        let reseeded = Experiment::load(reseeded_config).unwrap();
        let c = run_experiment(&reseeded).unwrap();
        assert_ne!(
            serde_json::to_string(&a.rows).unwrap(),
            serde_json::to_string(&c.rows).unwrap()
        );
    }

    #[test]
    fn appending_a_strategy_preserves_existing_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let mut trimmed = config.clone();
        trimmed.strategies.truncate(3);
        let full = run_experiment(&Experiment::load(config).unwrap()).unwrap();
        let partial = run_experiment(&Experiment::load(trimmed).unwrap()).unwrap();
        for row in &partial.rows {
            let matching = full
                .rows
                .iter()
                .find(|r| r.prompt_index == row.prompt_index && r.strategy == row.strategy)
                .unwrap();
            assert_eq!(row.candidates, matching.candidates);
        }
    }

    #[test]
    fn candidate_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config).unwrap();
        let report = run_experiment(&experiment).unwrap();
        let out = dir.path().join("run");
        write_run_files(&report, &out).unwrap();

        let text = fs::read_to_string(out.join("candidates.txt")).unwrap();
        let groups = parse_candidate_file(&text).unwrap();
        assert_eq!(groups.len(), report.rows.len());
        for (group, row) in groups.iter().zip(&report.rows) {
            assert_eq!(group.prompt_index, row.prompt_index);
            assert_eq!(group.strategy, row.strategy);
            assert_eq!(group.records, row.candidates);
        }

        // Metrics recomputed from re-read candidates match the report.
        let vocab = experiment.model.vocabulary();
        for (group, row) in groups.iter().zip(&report.rows) {
            let set = candidates_from_records(vocab, &group.records);
            let prompt_ids = experiment.encode_prompt(&row.prompt);
            let recomputed = compute_report(
                experiment.model.as_dyn(),
                &prompt_ids,
                &set,
                &experiment.config.metrics,
            )
            .unwrap();
            for (key, v) in recomputed.to_flat() {
                assert!(
                    (v - row.metrics[&key]).abs() < 1e-9,
                    "{key} mismatch after round trip"
                );
            }
        }
    }

    #[test]
    fn summary_table_shape_and_sorting() {
        let dir = tempfile::tempdir().unwrap();
        let config = grid_config(dir.path());
        let experiment = Experiment::load(config).unwrap();
        let report = run_experiment(&experiment).unwrap();

        let table = compare_strategies(&report, "ent-4", true).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 1 + report.aggregates.len());
        assert!(lines[0].starts_with("strategy\tppl"));

        // Descending order by the chosen column.
        let col = |line: &str| -> f64 { line.split('\t').last().unwrap().parse().unwrap() };
        for w in lines[1..].windows(2) {
            assert!(col(w[0]) >= col(w[1]));
        }

        assert!(compare_strategies(&report, "nonsense", false).is_err());

        // Values match recomputation from the aggregates.
        let first = lines[1].split('\t').next().unwrap();
        let agg = report.aggregate_for(first).unwrap();
        let expect = format!("{:.4}", agg.metrics["ppl"]);
        assert_eq!(lines[1].split('\t').nth(1).unwrap(), expect);
    }

    #[test]
    fn config_validation_errors() {
        let base = Path::new(".");
        // Unknown strategy kind.
        let bad = r#"
prompts = "p.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "c.txt"
[[strategy]]
name = "x"
kind = "warp"
"#;
        assert!(ExperimentConfig::from_toml(bad, base).is_err());

        // Duplicate names.
        let dup = r#"
prompts = "p.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "c.txt"
[[strategy]]
name = "x"
kind = "greedy"
[[strategy]]
name = "x"
kind = "greedy"
"#;
        assert!(ExperimentConfig::from_toml(dup, base).is_err());

        // Oversample target larger than the pool.
        let shallow = r#"
prompts = "p.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "c.txt"
[[strategy]]
name = "x"
kind = "sample"
num_samples = 5
oversample = "rank"
target = 10
"#;
        assert!(ExperimentConfig::from_toml(shallow, base).is_err());

        // PDC without embeddings.
        let no_vec = r#"
prompts = "p.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "c.txt"
[[strategy]]
name = "x"
kind = "sample"
num_samples = 20
oversample = "pdc"
target = 5
"#;
        assert!(ExperimentConfig::from_toml(no_vec, base).is_err());

        // Missing files surface before decoding.
        let ghost = r#"
prompts = "missing_prompts.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "missing_corpus.txt"
[[strategy]]
name = "x"
kind = "greedy"
"#;
        let config = ExperimentConfig::from_toml(ghost, base).unwrap();
        assert!(Experiment::load(config).is_err());
    }

    #[test]
    fn char_tokens_spell_lines() {
        assert_eq!(char_tokens("ab c"), "a b _ c");
        assert_eq!(char_tokens(""), "");
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.txt"), "ab\ncd\n").unwrap();
        fs::write(dir.path().join("p.txt"), "ab\n").unwrap();
        let toml_text = r#"
prompts = "p.txt"
max_len = 4
[model]
kind = "ngram"
corpus = "c.txt"
order = 2
alpha = 0.5
char_level = true
[[strategy]]
name = "g"
kind = "greedy"
"#;
        let config = ExperimentConfig::from_toml(toml_text, dir.path()).unwrap();
        let experiment = Experiment::load(config).unwrap();
        // Vocabulary is the character set, not the words.
        let vocab = experiment.model.vocabulary();
        assert!(vocab.id_of("a").is_some());
        assert!(vocab.id_of("ab").is_none());
        assert_eq!(experiment.encode_prompt("ab").len(), 2);
    }
}
