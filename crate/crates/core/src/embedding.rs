//! Case embeddings and the triplet-loss projection head.
//!
//! Base vectors come from a pluggable [`BaseEmbedder`] and are kept frozen.
//! A trainable D×D linear map sits on top; the final embedding is
//! `normalize(W · base(text))`. Training pulls cases with the same error
//! label together under the hinge triplet loss
//! `max(0, d(a,p) − d(a,n) + margin)` with `d` the squared Euclidean
//! distance between unit vectors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::http::{self, RetryPolicy};
use crate::spider::fnv1a64;

pub const DEFAULT_DIMENSION: usize = 768;
pub const PROJECTION_VERSION: &str = "ecpt-proj/1";

/// A unit-norm vector of fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalizes `values`; fails on zero norm or non-finite input.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = l2(&values);
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::invalid("embedding", "zero or non-finite norm"));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self(values))
    }

    /// Wraps values already known to be unit-norm (e.g. read back from disk).
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding", "non-finite value"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        dot(&self.0, &other.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Source of frozen base vectors.
pub trait BaseEmbedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Raw vectors, one per input text, not necessarily normalized.
    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;

    fn embed_base_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::invalid("embedding input", format!("text {i} is empty")));
        }
        let raw = self.embed_raw(texts)?;
        if raw.len() != texts.len() {
            return Err(Error::MalformedReply(format!(
                "{} vectors for {} texts",
                raw.len(),
                texts.len()
            )));
        }
        raw.into_iter()
            .map(|v| {
                if v.len() != self.dimension() {
                    return Err(Error::DimensionMismatch {
                        expected: self.dimension(),
                        got: v.len(),
                    });
                }
                EmbeddingVector::normalized(v)
            })
            .collect()
    }

    fn embed_base(&self, text: &str) -> Result<EmbeddingVector> {
        Ok(self.embed_base_batch(&[text])?.remove(0))
    }
}

/// Deterministic bag-of-tokens embedder: every alphanumeric token is
/// lowercased and hashed into one of `dim` buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        Self { dim }
    }

    pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric() && c != '_')
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut any = false;
        for tok in Self::tokens(text) {
            v[(fnv1a64(tok.as_bytes()) % self.dim as u64) as usize] += 1.0;
            any = true;
        }
        if !any {
            v[(fnv1a64(text.as_bytes()) % self.dim as u64) as usize] = 1.0;
        }
        v
    }
}

impl BaseEmbedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Client for an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub dim: usize,
    pub retry: RetryPolicy,
    client: Client,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>, dim: usize) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key,
            dim,
            retry: RetryPolicy::default(),
            client: Client::new(),
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingData {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingData>,
}

impl BaseEmbedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_raw(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({ "model": self.model, "input": texts });
        let url = http::endpoint(&self.base_url, "embeddings");
        let value = http::post_json(&self.client, &url, self.api_key.as_deref(), &body, self.retry)?;
        let mut reply: EmbeddingReply =
            serde_json::from_value(value).map_err(|e| Error::MalformedReply(e.to_string()))?;
        reply.data.sort_by_key(|d| d.index.unwrap_or(0));
        Ok(reply.data.into_iter().map(|d| d.embedding).collect())
    }
}

/// Trainable linear map applied to base vectors. Row-major `dim × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionModel {
    dim: usize,
    weight: Vec<f64>,
    pub seed: u64,
    pub epochs: usize,
}

impl ProjectionModel {
    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weight,
            seed: 0,
            epochs: 0,
        }
    }

    pub fn from_weights(dim: usize, weight: Vec<f64>, seed: u64, epochs: usize) -> Result<Self> {
        if weight.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: weight.len(),
            });
        }
        if weight.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("projection", "non-finite weight"));
        }
        Ok(Self {
            dim,
            weight,
            seed,
            epochs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weight
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn trained(&self) -> bool {
        self.epochs > 0
    }

    /// `W · x`, unnormalized.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight.chunks_exact(self.dim).map(|row| dot(row, x)).collect()
    }

    pub fn project(&self, base: &EmbeddingVector) -> Result<EmbeddingVector> {
        if base.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: base.dim(),
            });
        }
        EmbeddingVector::normalized(self.apply(base.as_slice()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{PROJECTION_VERSION} dim={} seed={} epochs={}\n",
            self.dim, self.seed, self.epochs
        );
        let mut out = header.into_bytes();
        for w in &self.weight {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(Error::CorruptedRecord {
                line: 1,
                reason: "missing header".into(),
            })?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::CorruptedRecord {
            line: 1,
            reason: "header is not UTF-8".into(),
        })?;
        let mut parts = header.split(' ');
        let version = parts.next().unwrap_or_default();
        if version != PROJECTION_VERSION {
            return Err(Error::VersionMismatch {
                expected: PROJECTION_VERSION.into(),
                found: version.into(),
            });
        }
        let mut fields = BTreeMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(|| Error::CorruptedRecord {
                line: 1,
                reason: format!("bad header field `{p}`"),
            })?;
            let v: u64 = v.parse().map_err(|_| Error::CorruptedRecord {
                line: 1,
                reason: format!("bad header value `{p}`"),
            })?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields.get(k).copied().ok_or_else(|| Error::CorruptedRecord {
                line: 1,
                reason: format!("header lacks `{k}`"),
            })
        };
        let dim = get("dim")? as usize;
        let body = &bytes[nl + 1..];
        if body.len() != dim * dim * 8 {
            return Err(Error::CorruptedRecord {
                line: 2,
                reason: format!("expected {} matrix bytes, found {}", dim * dim * 8, body.len()),
            });
        }
        let weight = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::from_weights(dim, weight, get("seed")?, get("epochs")? as usize)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Content hash identifying the embedding space this model produces.
    pub fn identity_hash(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// `normalize(W · embed_base(text))`.
pub fn embed(embedder: &dyn BaseEmbedder, text: &str, model: &ProjectionModel) -> Result<EmbeddingVector> {
    model.project(&embedder.embed_base(text)?)
}

pub fn triplet_loss(
    anchor: &EmbeddingVector,
    positive: &EmbeddingVector,
    negative: &EmbeddingVector,
    margin: f64,
) -> Result<f64> {
    let d = anchor.dim();
    for v in [positive, negative] {
        if v.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: v.dim(),
            });
        }
    }
    Ok(hinge(anchor.as_slice(), positive.as_slice(), negative.as_slice(), margin).max(0.0))
}

/// `d(a,p) − d(a,n) + margin`, before clamping.
fn hinge(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> f64 {
    sq_dist(a, p) - sq_dist(a, n) + margin
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 16,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::invalid("triplet config", "margin must be positive"));
        }
        if self.epochs < 1 {
            return Err(Error::invalid("triplet config", "epochs must be at least 1"));
        }
        if self.batch_size < 1 || !(self.learning_rate > 0.0) {
            return Err(Error::invalid("triplet config", "batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Base (unprojected) vectors of one training triplet.
#[derive(Debug, Clone, Copy)]
pub struct Triplet<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

/// Loss of a triplet after projection through `model`.
pub fn projected_loss(model: &ProjectionModel, t: Triplet<'_>, margin: f64) -> f64 {
    let proj = |x: &[f64]| {
        let u = model.apply(x);
        let n = l2(&u);
        u.into_iter().map(|v| v / n).collect::<Vec<_>>()
    };
    hinge(&proj(t.anchor), &proj(t.positive), &proj(t.negative), margin).max(0.0)
}

/// Loss, raw hinge value and analytic gradient of the projected triplet
/// loss with respect to the weight matrix (row-major), accumulated into
/// `grad`.
fn accumulate_gradient(model: &ProjectionModel, t: Triplet<'_>, margin: f64, grad: &mut [f64]) -> (f64, f64) {
    let dim = model.dim;
    let xs = [t.anchor, t.positive, t.negative];
    let us: Vec<Vec<f64>> = xs.iter().map(|x| model.apply(x)).collect();
    let norms: Vec<f64> = us.iter().map(|u| l2(u)).collect();
    let ys: Vec<Vec<f64>> = us
        .iter()
        .zip(&norms)
        .map(|(u, n)| u.iter().map(|v| v / n).collect())
        .collect();
    let h = hinge(&ys[0], &ys[1], &ys[2], margin);
    if h <= 0.0 {
        return (0.0, h);
    }
    // dL/dy for anchor, positive and negative.
    let gy: [Vec<f64>; 3] = [
        (0..dim).map(|i| 2.0 * (ys[2][i] - ys[1][i])).collect(),
        (0..dim).map(|i| -2.0 * (ys[0][i] - ys[1][i])).collect(),
        (0..dim).map(|i| 2.0 * (ys[0][i] - ys[2][i])).collect(),
    ];
    for k in 0..3 {
        let y = &ys[k];
        let proj = dot(y, &gy[k]);
        let gu: Vec<f64> = (0..dim).map(|i| (gy[k][i] - y[i] * proj) / norms[k]).collect();
        let x = xs[k];
        for (i, g) in gu.iter().enumerate() {
            let row = &mut grad[i * dim..(i + 1) * dim];
            for (r, xj) in row.iter_mut().zip(x) {
                *r += g * xj;
            }
        }
    }
    (h, h)
}

/// Analytic gradient of [`projected_loss`] with respect to the weights.
pub fn triplet_gradient(model: &ProjectionModel, t: Triplet<'_>, margin: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; model.dim * model.dim];
    let (loss, _) = accumulate_gradient(model, t, margin, &mut grad);
    (loss, grad)
}

/// Largest per-entry relative error between the analytic gradient and
/// central finite differences. Entries are compared as
/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(model: &ProjectionModel, t: Triplet<'_>, margin: f64, epsilon: f64) -> Result<f64> {
    let (_, analytic) = triplet_gradient(model, t, margin);
    let mut probe = ProjectionModel::identity(model.dim);
    probe.weight.clone_from(&model.weight);
    let hinge_at = |m: &ProjectionModel| {
        let proj = |x: &[f64]| {
            let u = m.apply(x);
            let n = l2(&u);
            u.into_iter().map(|v| v / n).collect::<Vec<_>>()
        };
        hinge(&proj(t.anchor), &proj(t.positive), &proj(t.negative), margin)
    };
    let h = hinge_at(model);
    let max_grad = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    // A perturbation of epsilon moves the hinge by at most about
    // epsilon * |grad|; stay clear of the kink by a wide factor.
    if h.abs() <= 100.0 * epsilon * (1.0 + max_grad) {
        return Err(Error::Inconclusive { hinge: h });
    }
    let mut worst = 0.0f64;
    for idx in 0..analytic.len() {
        let orig = probe.weight[idx];
        probe.weight[idx] = orig + epsilon;
        let plus = projected_loss(&probe, t, margin);
        probe.weight[idx] = orig - epsilon;
        let minus = projected_loss(&probe, t, margin);
        probe.weight[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ProjectionModel,
    /// Mean triplet loss per epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Samples one epoch of (anchor, positive, negative) index triplets.
/// Anchors whose label has no second member are skipped.
pub fn sample_triplets(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let others: BTreeMap<usize, Vec<usize>> = by_label
        .keys()
        .map(|&l| (l, (0..labels.len()).filter(|&i| labels[i] != l).collect()))
        .collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(rng);
    let mut out = Vec::with_capacity(order.len());
    for a in order {
        let same = &by_label[&labels[a]];
        let diff = &others[&labels[a]];
        if same.len() < 2 || diff.is_empty() {
            continue;
        }
        let mut p = same[rng.gen_range(0..same.len() - 1)];
        if p == a {
            p = same[same.len() - 1];
        }
        let n = diff[rng.gen_range(0..diff.len())];
        out.push((a, p, n));
    }
    out
}

/// Mini-batch SGD on the projection head over frozen base vectors.
/// Deterministic given `(data order, seed, config)`.
pub fn train_vectors(data: &[(EmbeddingVector, usize)], config: &TripletConfig, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    let dim = data
        .first()
        .map(|(v, _)| v.dim())
        .ok_or(Error::TooFewLabels(0))?;
    if let Some((v, _)) = data.iter().find(|(v, _)| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: v.dim(),
        });
    }
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        return Err(Error::TooFewLabels(distinct));
    }
    let mut model = ProjectionModel::identity(dim);
    model.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut grad = vec![0.0; dim * dim];
    for epoch in 0..config.epochs {
        let triplets = sample_triplets(&labels, &mut rng);
        let mut total = 0.0;
        for batch in triplets.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &(a, p, n) in batch {
                let t = Triplet {
                    anchor: data[a].0.as_slice(),
                    positive: data[p].0.as_slice(),
                    negative: data[n].0.as_slice(),
                };
                total += accumulate_gradient(&model, t, config.margin, &mut grad).0;
            }
            let step = config.learning_rate / batch.len() as f64;
            for (w, g) in model.weight.iter_mut().zip(&grad) {
                *w -= step * g;
            }
            if model.weight.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite { epoch: epoch + 1 });
            }
        }
        let mean = if triplets.is_empty() { 0.0 } else { total / triplets.len() as f64 };
        if !mean.is_finite() {
            return Err(Error::NonFinite { epoch: epoch + 1 });
        }
        epoch_losses.push(mean);
        model.epochs = epoch + 1;
    }
    Ok(TrainOutcome { model, epoch_losses })
}

/// Embeds labeled texts with the base embedder, then trains on them.
pub fn train(
    embedder: &dyn BaseEmbedder,
    cases: &[(String, crate::case::ErrorId)],
    config: &TripletConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let texts: Vec<&str> = cases.iter().map(|(t, _)| t.as_str()).collect();
    let vectors = embedder.embed_base_batch(&texts)?;
    let data: Vec<(EmbeddingVector, usize)> = vectors
        .into_iter()
        .zip(cases)
        .map(|(v, (_, l))| (v, l.label_index()))
        .collect();
    train_vectors(&data, config, seed)
}

/// Mean of `projected_loss` over index triplets.
pub fn mean_loss(model: &ProjectionModel, data: &[(EmbeddingVector, usize)], triplets: &[(usize, usize, usize)], margin: f64) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let sum: f64 = triplets
        .iter()
        .map(|&(a, p, n)| {
            projected_loss(
                model,
                Triplet {
                    anchor: data[a].0.as_slice(),
                    positive: data[p].0.as_slice(),
                    negative: data[n].0.as_slice(),
                },
                margin,
            )
        })
        .sum();
    sum / triplets.len() as f64
}

/// Leave-one-out nearest-neighbour label precision under cosine similarity.
/// Ties go to the lower index.
pub fn precision_at_1(vectors: &[EmbeddingVector], labels: &[usize]) -> f64 {
    if vectors.len() < 2 {
        return 0.0;
    }
    let hits = (0..vectors.len())
        .filter(|&i| {
            let mut best: Option<(usize, f64)> = None;
            for j in (0..vectors.len()).filter(|&j| j != i) {
                let s = vectors[i].dot(&vectors[j]);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best.is_some_and(|(j, _)| labels[j] == labels[i])
        })
        .count();
    hits as f64 / vectors.len() as f64
}
