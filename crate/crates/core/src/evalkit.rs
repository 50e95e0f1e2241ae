//! Prompt-averaged class embeddings, zero-shot classification, top-k
//! accuracy and few-shot linear probing on frozen embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::EmbeddingCache;
use crate::encoder::{Modality, ModelState};
use crate::error::{Error, Result};
use crate::linalg::{dot, is_unit, normalized, Matrix};

const TEMPLATES: &str = include_str!("../data/templates.txt");

/// The shipped sentence templates; `{}` marks the class name.
pub fn default_templates() -> Vec<&'static str> {
    TEMPLATES.lines().map(str::trim).filter(|l| !l.is_empty()).collect()
}

/// Fills every template with `label`. These sentences double as the text
/// cache keys of class prompts.
pub fn prompt_sentences(label: &str, templates: &[&str]) -> Vec<String> {
    templates.iter().map(|t| t.replace("{}", label)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptAveraging {
    /// Normalize each projected template, average, re-normalize.
    #[default]
    NormalizeThenMean,
    /// Average the raw projections, then normalize once.
    MeanThenNormalize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingSet {
    labels: Vec<String>,
    vectors: Matrix,
}

impl ClassEmbeddingSet {
    pub fn new(labels: Vec<String>, vectors: Matrix) -> Result<Self> {
        if labels.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                context: "class labels vs vectors".into(),
                expected: labels.len(),
                found: vectors.rows(),
            });
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::DuplicateId(l.clone()));
            }
        }
        for (row, v) in vectors.iter_rows().enumerate() {
            if !is_unit(v, 1e-6) {
                return Err(Error::NonUnitRow {
                    matrix: "class vectors",
                    row,
                    norm: crate::linalg::norm(v),
                });
            }
        }
        Ok(Self { labels, vectors })
    }

    /// Normalizes each row before building the set.
    pub fn from_raw(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut labels = Vec::with_capacity(entries.len());
        let mut rows = Vec::with_capacity(entries.len());
        for (label, v) in entries {
            rows.push(normalized(&v, &format!("class `{label}`"))?.0);
            labels.push(label);
        }
        Self::new(labels, Matrix::from_rows(&rows)?)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Normalized mean of unit vectors.
pub fn mean_direction(units: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = units
        .first()
        .ok_or_else(|| Error::InvalidConfig("prompt averaging needs at least one template".into()))?;
    let mut acc = vec![0.0; first.len()];
    for u in units {
        if u.len() != acc.len() {
            return Err(Error::DimensionMismatch {
                context: "template vectors".into(),
                expected: acc.len(),
                found: u.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(u) {
            *a += x;
        }
    }
    let n = units.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(normalized(&acc, "prompt mean")?.0)
}

pub fn prompt_average(templates: &[Vec<f32>], state: &ModelState) -> Result<Vec<f64>> {
    prompt_average_with(templates, state, PromptAveraging::default())
}

pub fn prompt_average_with(templates: &[Vec<f32>], state: &ModelState, mode: PromptAveraging) -> Result<Vec<f64>> {
    if templates.is_empty() {
        return Err(Error::InvalidConfig(
            "prompt averaging needs at least one template".into(),
        ));
    }
    let projected = templates
        .iter()
        .map(|t| {
            let (unit, norm) = state.project_raw(Modality::Text, t)?;
            Ok(match mode {
                PromptAveraging::NormalizeThenMean => unit,
                PromptAveraging::MeanThenNormalize => unit.into_iter().map(|x| x * norm).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    mean_direction(&projected)
}

/// Builds class vectors from per-class raw template vectors.
pub fn class_embeddings(
    classes: &[(String, Vec<Vec<f32>>)],
    state: &ModelState,
    mode: PromptAveraging,
) -> Result<ClassEmbeddingSet> {
    let rows = classes
        .iter()
        .map(|(label, t)| {
            prompt_average_with(t, state, mode).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(format!("prompt mean of class `{label}`")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = classes.iter().map(|(l, _)| l.clone()).collect();
    ClassEmbeddingSet::new(labels, Matrix::from_rows(&rows)?)
}

/// Looks up each class's filled template sentences in the text cache.
pub fn class_prompts_from_cache(
    cache: &EmbeddingCache,
    labels: &[String],
    templates: &[&str],
) -> Result<Vec<(String, Vec<Vec<f32>>)>> {
    labels
        .iter()
        .map(|label| {
            let vectors = prompt_sentences(label, templates)
                .into_iter()
                .map(|key| {
                    cache.text(&key).map(<[f32]>::to_vec).ok_or(Error::DanglingKey {
                        record: label.clone(),
                        kind: "class prompt",
                        key,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((label.clone(), vectors))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLabel {
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub ranked: Vec<ScoredLabel>,
}

/// Ranks classes for every shape by cosine, descending, ties by class index.
pub fn zero_shot_classify(
    ids: &[String],
    embeddings: &Matrix,
    classes: &ClassEmbeddingSet,
    k: usize,
) -> Result<Vec<Prediction>> {
    if ids.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch {
            context: "shape ids vs embeddings".into(),
            expected: ids.len(),
            found: embeddings.rows(),
        });
    }
    if embeddings.cols() != classes.dim() {
        return Err(Error::DimensionMismatch {
            context: "shape embeddings vs class vectors".into(),
            expected: classes.dim(),
            found: embeddings.cols(),
        });
    }
    if k == 0 || k > classes.len() {
        return Err(Error::InvalidConfig(format!(
            "k must be in 1..={}, got {k}",
            classes.len()
        )));
    }
    Ok(ids
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let h = embeddings.row(i);
            let mut scored: Vec<(usize, f64)> = classes.vectors.iter_rows().map(|c| dot(h, c)).enumerate().collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            Prediction {
                id: id.clone(),
                ranked: scored
                    .into_iter()
                    .take(k)
                    .map(|(c, score)| ScoredLabel {
                        label: classes.labels[c].clone(),
                        score,
                    })
                    .collect(),
            }
        })
        .collect())
}

/// Fraction of predictions whose true label is among the first `k`.
pub fn topk_accuracy(predictions: &[Prediction], truth: &HashMap<String, String>, k: usize) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::InvalidConfig("no predictions to score".into()));
    }
    let mut hits = 0usize;
    for p in predictions {
        let label = truth.get(&p.id).ok_or_else(|| Error::MissingLabel(p.id.clone()))?;
        if p.ranked.len() < k {
            return Err(Error::InvalidConfig(format!(
                "`{}` has {} predictions, k = {k}",
                p.id,
                p.ranked.len()
            )));
        }
        if p.ranked[..k].iter().any(|s| &s.label == label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub name: String,
    pub num_shapes: usize,
    pub num_classes: usize,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

/// Top-1/3/5 accuracy; k is clamped to the class count.
pub fn evaluate_zero_shot(
    name: &str,
    ids: &[String],
    embeddings: &Matrix,
    classes: &ClassEmbeddingSet,
    truth: &HashMap<String, String>,
) -> Result<BenchmarkResult> {
    let kmax = classes.len().min(5);
    let preds = zero_shot_classify(ids, embeddings, classes, kmax)?;
    let at = |k: usize| topk_accuracy(&preds, truth, k.min(kmax));
    Ok(BenchmarkResult {
        name: name.to_string(),
        num_shapes: ids.len(),
        num_classes: classes.len(),
        top1: at(1)?,
        top3: at(3)?,
        top5: at(5)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub shots: usize,
    pub seeds: usize,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub max_iters: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            seeds: 10,
            l2: 1e-4,
            max_iters: 300,
            learning_rate: 1.0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shots == 0 || self.seeds == 0 {
            return Err(Error::InvalidConfig("probe shots and seeds must be at least 1".into()));
        }
        if !(self.l2 >= 0.0 && self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(
                "probe l2 must be ≥ 0 and learning_rate > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Multinomial logistic regression weights, one row of `dim + 1` per class.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Matrix,
}

impl LinearClassifier {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        self.weights.iter_rows().map(|w| dot(&w[..d], x) + w[d]).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (c, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = c;
            }
        }
        best
    }
}

/// Full-batch gradient descent on the L2-regularized softmax cross-entropy.
pub fn fit_logistic(xs: &[&[f64]], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> LinearClassifier {
    let d = xs.first().map_or(0, |x| x.len());
    let n = xs.len() as f64;
    let mut model = LinearClassifier {
        weights: Matrix::zeros(classes, d + 1),
    };
    let mut grad = Matrix::zeros(classes, d + 1);
    for _ in 0..cfg.max_iters {
        grad.as_mut_slice().fill(0.0);
        for (x, &y) in xs.iter().zip(ys) {
            let logits = model.logits(x);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (c, e) in exps.iter().enumerate() {
                let r = e / z - if c == y { 1.0 } else { 0.0 };
                let g = grad.row_mut(c);
                for (gj, xj) in g[..d].iter_mut().zip(x.iter()) {
                    *gj += r * xj;
                }
                g[d] += r;
            }
        }
        for c in 0..classes {
            let (w, g) = (model.weights.row_mut(c), grad.row(c));
            for j in 0..=d {
                let reg = if j < d { cfg.l2 * w[j] } else { 0.0 };
                w[j] -= cfg.learning_rate * (g[j] / n + reg);
            }
        }
    }
    model
}

/// Few-shot probe: per seed, sample `shots` training examples per class, fit,
/// and score on the full test set. Test labels unseen in training count as
/// errors.
pub fn linear_probe<R: Rng + ?Sized>(
    train: &[(Vec<f64>, String)],
    test: &[(Vec<f64>, String)],
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeReport> {
    config.validate()?;
    if test.is_empty() {
        return Err(Error::InvalidConfig("probe test set is empty".into()));
    }
    let dim = train
        .first()
        .map(|(v, _)| v.len())
        .ok_or_else(|| Error::InvalidConfig("probe training set is empty".into()))?;
    for (v, _) in train.iter().chain(test) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "probe embeddings".into(),
                expected: dim,
                found: v.len(),
            });
        }
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, label)) in train.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    for (label, members) in &by_class {
        if members.len() < config.shots {
            return Err(Error::InsufficientExamples {
                label: label.to_string(),
                needed: config.shots,
                available: members.len(),
            });
        }
    }
    let class_index: HashMap<&str, usize> = by_class.keys().enumerate().map(|(i, l)| (*l, i)).collect();
    let seeds: Vec<u64> = (0..config.seeds).map(|_| rng.random()).collect();
    let per_seed: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (c, members) in by_class.values().enumerate() {
                let mut picked = sample(&mut rng, members.len(), config.shots).into_vec();
                picked.sort_unstable();
                for p in picked {
                    xs.push(train[members[p]].0.as_slice());
                    ys.push(c);
                }
            }
            let model = fit_logistic(&xs, &ys, by_class.len(), config);
            let correct = test
                .iter()
                .filter(|(x, label)| class_index.get(label.as_str()) == Some(&model.predict(x)))
                .count();
            correct as f64 / test.len() as f64
        })
        .collect();
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    let std = (per_seed.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(ProbeReport {
        shots: config.shots,
        mean,
        std,
        per_seed,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmarks: Vec<BenchmarkResult>,
    pub probe: Vec<ProbeReport>,
}
