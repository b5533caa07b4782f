//! Sequence embeddings, k-means, and post-decoding clustering (PDC).
//!
//! Clustered beam selection and PDC share the machinery here. Embeddings
//! come from a pluggable [`SequenceEmbedder`]: either averaged word vectors
//! loaded from a text file, or precomputed per-candidate vectors supplied
//! by an external encoder.

use std::collections::HashMap;
use std::path::Path;

use crate::candidate::{base_score_order, CandidateSet, ScoredHypothesis};
use crate::error::{Error, Result};
use crate::model::{TokenId, Vocabulary};
use crate::rng::CounterRng;

// ---------------------------------------------------------------------------
// Word vectors
// ---------------------------------------------------------------------------

/// Token-to-vector lookup with a fixed dimension.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingProvider {
    /// Parse the word-vector text format: one `token v1 v2 ... vd` line per
    /// token, dimension inferred from the first line. Errors carry the
    /// offending line number.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dim = 0usize;
        let mut vectors = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts.next().expect("non-empty line").to_string();
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("malformed float {p:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.is_empty() {
                return Err(Error::Parse { line: lineno, message: "no vector values".into() });
            }
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite value {bad}"),
                });
            }
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("dimension {} does not match {dim}", values.len()),
                });
            }
            vectors.insert(token, values);
        }
        if vectors.is_empty() {
            return Err(Error::validation("word-vector file contains no entries"));
        }
        Ok(EmbeddingProvider { dim, vectors })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Build from in-memory entries; all vectors must share one dimension.
    pub fn from_entries<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut dim = 0usize;
        let mut vectors = HashMap::new();
        for (token, values) in entries {
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(Error::validation("inconsistent embedding dimensions"));
            }
            vectors.insert(token.into(), values);
        }
        if dim == 0 {
            return Err(Error::validation("no embedding entries"));
        }
        Ok(EmbeddingProvider { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Arithmetic mean of the vectors for the tokens present in the
    /// provider; absent tokens are skipped. An empty or fully-unknown
    /// sequence embeds to the zero vector.
    pub fn embed_sequence<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut sum = vec![0.0; self.dim];
        let mut hits = 0usize;
        for token in tokens {
            if let Some(v) = self.vectors.get(token) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                hits += 1;
            }
        }
        if hits > 0 {
            for s in &mut sum {
                *s /= hits as f64;
            }
        }
        sum
    }
}

// ---------------------------------------------------------------------------
// Sequence embedders
// ---------------------------------------------------------------------------

/// Maps a candidate (by position and token ids) to a fixed-size vector.
pub trait SequenceEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, candidate_index: usize, tokens: &[TokenId]) -> Result<Vec<f64>>;
}

/// Embeds a candidate as the average of its tokens' word vectors.
#[derive(Debug, Clone)]
pub struct WordVectorEmbedder {
    provider: EmbeddingProvider,
    vocab: Vocabulary,
}

impl WordVectorEmbedder {
    pub fn new(provider: EmbeddingProvider, vocab: Vocabulary) -> Self {
        WordVectorEmbedder { provider, vocab }
    }
}

impl SequenceEmbedder for WordVectorEmbedder {
    fn dim(&self) -> usize {
        self.provider.dim()
    }

    fn embed(&self, _candidate_index: usize, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let strs = tokens
            .iter()
            .map(|&id| self.vocab.token_str(id))
            .collect::<Result<Vec<&str>>>()?;
        Ok(self.provider.embed_sequence(strs))
    }
}

/// Embeddings precomputed by an external encoder, keyed by candidate index.
/// This is the file-based hook for plugging in arbitrary sentence encoders.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbedder {
    dim: usize,
    by_index: HashMap<usize, Vec<f64>>,
}

impl PrecomputedEmbedder {
    /// Parse the `candidate_index v1 ... vd` line format.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut dim = 0usize;
        let mut by_index = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let index: usize = parts
                .next()
                .expect("non-empty line")
                .parse()
                .map_err(|_| Error::Parse {
                    line: lineno,
                    message: "malformed candidate index".into(),
                })?;
            let values = parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| Error::Parse {
                        line: lineno,
                        message: format!("malformed float {p:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if dim == 0 {
                dim = values.len();
            } else if values.len() != dim {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("dimension {} does not match {dim}", values.len()),
                });
            }
            by_index.insert(index, values);
        }
        if by_index.is_empty() {
            return Err(Error::validation("embedding file contains no entries"));
        }
        Ok(PrecomputedEmbedder { dim, by_index })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}

impl SequenceEmbedder for PrecomputedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, candidate_index: usize, _tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.by_index
            .get(&candidate_index)
            .cloned()
            .ok_or_else(|| Error::validation(format!("no embedding for candidate {candidate_index}")))
    }
}

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    /// Cluster id per input point.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment pass; non-increasing.
    pub inertia_trace: Vec<f64>,
}

impl ClusterResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let k = self.centroids.len();
        let mut sizes = vec![0usize; k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given `seed`:
/// weighted draws use inverse-CDF over point order, nearest-centroid ties
/// break toward the lower cluster id, and empty clusters are reseeded from
/// the point farthest from its assigned centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterResult> {
    if k < 1 || k > points.len() {
        return Err(Error::validation(format!(
            "k = {k} outside [1, {}]",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::validation("points have inconsistent dimensions"));
    }

    let mut rng = CounterRng::new(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = assign_all(points, &centroids);
    let mut inertia_trace = vec![inertia_of(points, &centroids, &assignments)];

    for _ in 0..max_iters {
        let new_centroids = updated_centroids(points, &centroids, &assignments, k);
        let movement = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        assignments = assign_all(points, &centroids);
        inertia_trace.push(inertia_of(points, &centroids, &assignments));
        if movement < tol {
            break;
        }
    }

    let inertia = *inertia_trace.last().expect("at least one pass");
    Ok(ClusterResult { assignments, centroids, inertia, inertia_trace })
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut CounterRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen: Vec<usize> = vec![rng.next_index(n)];
    while chosen.len() < k {
        // D(x)^2 to the nearest chosen centroid.
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                chosen
                    .iter()
                    .map(|&c| squared_distance(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut cumulative = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                cumulative += w;
                if target < cumulative {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // All remaining points coincide with a centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0usize;
            let mut best_d = squared_distance(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum()
}

fn updated_centroids(
    points: &[Vec<f64>],
    old: &[Vec<f64>],
    assignments: &[usize],
    k: usize,
) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut reseeded: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] == 0 {
            // Reseed from the farthest point not already used for repair.
            let far = points
                .iter()
                .enumerate()
                .filter(|(i, _)| !reseeded.contains(i))
                .map(|(i, p)| (i, squared_distance(p, &old[assignments[i]])))
                .max_by(|(ia, da), (ib, db)| da.total_cmp(db).then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            reseeded.push(far);
            centroids.push(points[far].clone());
        } else {
            centroids.push(sums[c].iter().map(|s| s / counts[c] as f64).collect());
        }
    }
    centroids
}

// ---------------------------------------------------------------------------
// Post-decoding clustering
// ---------------------------------------------------------------------------

/// How PDC arrived at its selection; used by tests and reports.
#[derive(Debug, Clone)]
pub struct PdcTrace {
    pub assignments: Vec<usize>,
    /// Surviving cluster ids, largest first (ties toward the lower id).
    pub cluster_order: Vec<usize>,
    /// Clusters removed for having two or fewer members.
    pub discarded_clusters: Vec<usize>,
    /// `(candidate_index, cluster_id, pass)` in selection order.
    pub picks: Vec<(usize, usize, usize)>,
    /// Candidates taken from discarded clusters by global rank to reach `m`.
    pub fill_picks: Vec<usize>,
}

/// Filter an oversampled candidate set down to `target` outputs.
///
/// Candidates are embedded and clustered into `k` groups; clusters of size
/// two or fewer are discarded. Selection then walks the surviving clusters
/// in descending size order, taking each cluster's best-scoring unused
/// member per pass, until `target` candidates are chosen. If the surviving
/// clusters cannot supply enough, the remainder is filled from the
/// discarded candidates by global log-likelihood rank. The output is sorted
/// by descending `base_score` and has exactly `target` members.
pub fn pdc_filter(
    candidates: &CandidateSet,
    target: usize,
    k: usize,
    embedder: &dyn SequenceEmbedder,
    seed: u64,
) -> Result<CandidateSet> {
    pdc_filter_traced(candidates, target, k, embedder, seed).map(|(set, _)| set)
}

pub fn pdc_filter_traced(
    candidates: &CandidateSet,
    target: usize,
    k: usize,
    embedder: &dyn SequenceEmbedder,
    seed: u64,
) -> Result<(CandidateSet, PdcTrace)> {
    let n = candidates.len();
    if target < 1 {
        return Err(Error::validation("target must be >= 1"));
    }
    if n < target {
        return Err(Error::validation(format!(
            "cannot select {target} from {n} candidates"
        )));
    }
    if k < 1 {
        return Err(Error::validation("cluster count must be >= 1"));
    }

    let points = candidates
        .iter()
        .enumerate()
        .map(|(i, h)| embedder.embed(i, &h.tokens))
        .collect::<Result<Vec<_>>>()?;
    let clustering = kmeans(&points, k.min(n), seed, 100, 1e-9)?;
    let sizes = clustering.cluster_sizes();

    // Members per cluster, best scores first.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sizes.len()];
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| base_score_order(&candidates[a], &candidates[b]));
    for &i in &rank {
        members[clustering.assignments[i]].push(i);
    }

    let mut cluster_order: Vec<usize> =
        (0..sizes.len()).filter(|&c| sizes[c] > 2).collect();
    cluster_order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    let discarded_clusters: Vec<usize> =
        (0..sizes.len()).filter(|&c| sizes[c] <= 2).collect();

    let mut picks: Vec<(usize, usize, usize)> = Vec::new();
    let mut selected = vec![false; n];
    let max_pass = cluster_order.iter().map(|&c| sizes[c]).max().unwrap_or(0);
    'outer: for pass in 0..max_pass {
        for &c in &cluster_order {
            if picks.len() == target {
                break 'outer;
            }
            if let Some(&idx) = members[c].get(pass) {
                selected[idx] = true;
                picks.push((idx, c, pass));
            }
        }
    }

    // Surviving clusters exhausted: fill by global rank from what is left.
    let mut fill_picks = Vec::new();
    if picks.len() < target {
        for &i in &rank {
            if picks.len() + fill_picks.len() == target {
                break;
            }
            if !selected[i] {
                selected[i] = true;
                fill_picks.push(i);
            }
        }
    }

    let mut chosen: Vec<ScoredHypothesis> = picks
        .iter()
        .map(|&(i, _, _)| candidates[i].clone())
        .chain(fill_picks.iter().map(|&i| candidates[i].clone()))
        .collect();
    chosen.sort_by(base_score_order);
    let trace = PdcTrace {
        assignments: clustering.assignments,
        cluster_order,
        discarded_clusters,
        picks,
        fill_picks,
    };
    Ok((CandidateSet::new(chosen), trace))
}
