//! Four-term tri-modal contrastive objective with a learnable temperature and
//! directional negative masking.
//!
//! For a batch of `n` aligned rows the loss is
//! `-1/(4n) Σ_i [ℓ(P_i→T) + ℓ(T_i→P) + ℓ(P_i→I) + ℓ(I_i→P)]`, where each `ℓ`
//! is the log-softmax of the positive logit among the anchor's candidates.
//! `mask.is_excluded(i, j)` drops `j` from every softmax anchored at `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

const UNIT_TOL: f64 = 1e-6;

/// Three `n × d` matrices of unit rows: shape, text and image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedBatch {
    pub hp: Matrix,
    pub ht: Matrix,
    pub hi: Matrix,
    /// `false` for shapes whose texts were all filtered out; their text
    /// terms are dropped and their text rows are never used as negatives.
    pub text_valid: Vec<bool>,
}

impl AlignedBatch {
    pub fn new(hp: Matrix, ht: Matrix, hi: Matrix) -> Result<Self> {
        let n = hp.rows();
        Self::with_text_valid(hp, ht, hi, vec![true; n])
    }

    pub fn with_text_valid(hp: Matrix, ht: Matrix, hi: Matrix, text_valid: Vec<bool>) -> Result<Self> {
        let n = hp.rows();
        let d = hp.cols();
        if n == 0 {
            return Err(Error::InvalidConfig("batch must have at least one row".into()));
        }
        for (name, m) in [("HT", &ht), ("HI", &hi)] {
            if m.rows() != n {
                return Err(Error::DimensionMismatch {
                    context: format!("{name} rows"),
                    expected: n,
                    found: m.rows(),
                });
            }
            if m.cols() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("{name} columns"),
                    expected: d,
                    found: m.cols(),
                });
            }
        }
        if text_valid.len() != n {
            return Err(Error::DimensionMismatch {
                context: "text validity flags".into(),
                expected: n,
                found: text_valid.len(),
            });
        }
        for (name, m) in [("HP", &hp), ("HT", &ht), ("HI", &hi)] {
            for i in 0..n {
                if name == "HT" && !text_valid[i] {
                    continue;
                }
                let norm = dot(m.row(i), m.row(i)).sqrt();
                if !((norm - 1.0).abs() <= UNIT_TOL) {
                    return Err(Error::NonUnitRow {
                        matrix: name,
                        row: i,
                        norm,
                    });
                }
            }
        }
        Ok(Self { hp, ht, hi, text_valid })
    }

    /// Builds a batch without checking row norms. The loss is still well
    /// defined off the unit sphere, which finite-difference checks rely on.
    pub fn new_unchecked(hp: Matrix, ht: Matrix, hi: Matrix, text_valid: Vec<bool>) -> Self {
        Self { hp, ht, hi, text_valid }
    }

    pub fn len(&self) -> usize {
        self.hp.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Directional `n × n` exclusion mask; the diagonal is always `false`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeMask {
    n: usize,
    excluded: Vec<bool>,
}

impl NegativeMask {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            excluded: vec![false; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Excludes `j` from `i`'s negatives. Diagonal requests are ignored.
    pub fn exclude(&mut self, i: usize, j: usize) {
        if i != j {
            self.excluded[i * self.n + j] = true;
        }
    }

    #[inline]
    pub fn is_excluded(&self, i: usize, j: usize) -> bool {
        self.excluded[i * self.n + j]
    }

    pub fn count(&self) -> usize {
        self.excluded.iter().filter(|&&e| e).count()
    }

    /// Union of the mask with its transpose.
    pub fn symmetrized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.is_excluded(i, j) {
                    out.exclude(j, i);
                }
            }
        }
        out
    }

    /// Copy with rows and columns reordered: entry `(a, b)` of the result is
    /// entry `(order[a], order[b])` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut out = Self::empty(order.len());
        for (a, &i) in order.iter().enumerate() {
            for (b, &j) in order.iter().enumerate() {
                if self.is_excluded(i, j) {
                    out.exclude(a, b);
                }
            }
        }
        out
    }
}

/// `(i, j) ↦ (HA_i · HB_j) / τ`.
pub fn batch_similarity(ha: &Matrix, hb: &Matrix, tau: f64) -> Result<Matrix> {
    check_tau(tau)?;
    if ha.cols() != hb.cols() {
        return Err(Error::DimensionMismatch {
            context: "similarity operands".into(),
            expected: ha.cols(),
            found: hb.cols(),
        });
    }
    let mut out = Matrix::zeros(ha.rows(), hb.rows());
    for i in 0..ha.rows() {
        let a = ha.row(i);
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(a, hb.row(j)) / tau;
        }
    }
    Ok(out)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(tau))
    }
}

/// Index of each term within [`anchor_terms`] output.
pub const TERM_NAMES: [&str; 4] = ["P->T", "T->P", "P->I", "I->P"];

/// Gradients of the loss with respect to the unit rows and `log τ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub d_hp: Matrix,
    pub d_ht: Matrix,
    pub d_hi: Matrix,
    pub d_log_tau: f64,
}

/// A softmax over the candidate set of one anchor: `(logit, j)` pairs with
/// the positive at `j == anchor`.
struct Softmax {
    log_prob_positive: f64,
    /// Softmax probabilities aligned with the candidate list.
    probs: Vec<f64>,
}

fn softmax(logits: &[f64], positive: usize) -> Softmax {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Softmax {
        log_prob_positive: logits[positive] - max - sum.ln(),
        probs: exps.iter().map(|e| e / sum).collect(),
    }
}

/// Which logit matrix a term reads and whether the anchor indexes its rows
/// (`P` anchored) or its columns (`T`/`I` anchored).
#[derive(Clone, Copy, PartialEq)]
enum Term {
    ShapeToText,
    TextToShape,
    ShapeToImage,
    ImageToShape,
}

impl Term {
    const ALL: [Term; 4] = [
        Term::ShapeToText,
        Term::TextToShape,
        Term::ShapeToImage,
        Term::ImageToShape,
    ];

    fn uses_text(self) -> bool {
        matches!(self, Term::ShapeToText | Term::TextToShape)
    }

    fn anchor_is_row(self) -> bool {
        matches!(self, Term::ShapeToText | Term::ShapeToImage)
    }
}

/// Candidate indices `j` for the term anchored at `i`, with the positive first.
fn candidates(batch: &AlignedBatch, mask: &NegativeMask, term: Term, i: usize) -> Vec<usize> {
    let n = batch.len();
    let mut c = Vec::with_capacity(n);
    c.push(i);
    for j in 0..n {
        if j == i || mask.is_excluded(i, j) {
            continue;
        }
        // Shape-anchored text terms cannot contrast against a missing text.
        if term == Term::ShapeToText && !batch.text_valid[j] {
            continue;
        }
        c.push(j);
    }
    c
}

struct Evaluated {
    /// Per anchor, the four log-probabilities (`None` when the term is dropped).
    terms: Vec<[Option<f64>; 4]>,
    /// d(loss)/d(logit) for the P·T and P·I logit matrices.
    d_pt: Matrix,
    d_pi: Matrix,
    pt: Matrix,
    pi: Matrix,
}

fn evaluate(batch: &AlignedBatch, tau: f64, mask: &NegativeMask, want_grad: bool) -> Result<Evaluated> {
    check_tau(tau)?;
    let n = batch.len();
    if mask.len() != n {
        return Err(Error::DimensionMismatch {
            context: "negative mask".into(),
            expected: n,
            found: mask.len(),
        });
    }
    let pt = batch_similarity(&batch.hp, &batch.ht, tau)?;
    let pi = batch_similarity(&batch.hp, &batch.hi, tau)?;
    let scale = 1.0 / (4.0 * n as f64);
    let mut d_pt = Matrix::zeros(if want_grad { n } else { 0 }, if want_grad { n } else { 0 });
    let mut d_pi = d_pt.clone();
    let mut terms = vec![[None; 4]; n];

    for i in 0..n {
        for (t, term) in Term::ALL.into_iter().enumerate() {
            if term.uses_text() && !batch.text_valid[i] {
                continue;
            }
            let logits_m = if term.uses_text() { &pt } else { &pi };
            let cand = candidates(batch, mask, term, i);
            let at = |j: usize| {
                if term.anchor_is_row() {
                    (i, j)
                } else {
                    (j, i)
                }
            };
            let logits: Vec<f64> = cand
                .iter()
                .map(|&j| {
                    let (r, c) = at(j);
                    logits_m.get(r, c)
                })
                .collect();
            let sm = softmax(&logits, 0);
            terms[i][t] = Some(sm.log_prob_positive);
            if want_grad {
                let d = if term.uses_text() { &mut d_pt } else { &mut d_pi };
                for (k, &j) in cand.iter().enumerate() {
                    let (r, c) = at(j);
                    let target = if k == 0 { 1.0 } else { 0.0 };
                    d.set(r, c, d.get(r, c) + scale * (sm.probs[k] - target));
                }
            }
        }
    }
    Ok(Evaluated {
        terms,
        d_pt,
        d_pi,
        pt,
        pi,
    })
}

fn total(terms: &[[Option<f64>; 4]]) -> f64 {
    let n = terms.len() as f64;
    let sum: f64 = terms.iter().flat_map(|t| t.iter().flatten()).sum();
    -sum / (4.0 * n)
}

/// Mean contrastive loss of the batch.
pub fn contrastive_loss(batch: &AlignedBatch, tau: f64, mask: &NegativeMask) -> Result<f64> {
    Ok(total(&evaluate(batch, tau, mask, false)?.terms))
}

/// Per-anchor log-probabilities of the positive, in [`TERM_NAMES`] order;
/// `None` for dropped text terms.
pub fn anchor_terms(batch: &AlignedBatch, tau: f64, mask: &NegativeMask) -> Result<Vec<[Option<f64>; 4]>> {
    Ok(evaluate(batch, tau, mask, false)?.terms)
}

/// Loss together with its gradients with respect to the unit rows and `log τ`.
pub fn contrastive_loss_grad(batch: &AlignedBatch, tau: f64, mask: &NegativeMask) -> Result<LossGrad> {
    let ev = evaluate(batch, tau, mask, true)?;
    let n = batch.len();
    let d = batch.hp.cols();
    let mut d_hp = Matrix::zeros(n, d);
    let mut d_ht = Matrix::zeros(n, d);
    let mut d_hi = Matrix::zeros(n, d);
    let mut d_log_tau = 0.0;
    for (dz, z, other, d_other) in [
        (&ev.d_pt, &ev.pt, &batch.ht, &mut d_ht),
        (&ev.d_pi, &ev.pi, &batch.hi, &mut d_hi),
    ] {
        for i in 0..n {
            for j in 0..n {
                let g = dz.get(i, j);
                if g == 0.0 {
                    continue;
                }
                // z_ij = hp_i · other_j / τ, and dz/d(log τ) = -z.
                d_log_tau -= g * z.get(i, j);
                let gt = g / tau;
                for (a, b) in d_hp.row_mut(i).iter_mut().zip(other.row(j)) {
                    *a += gt * b;
                }
                for (a, b) in d_other.row_mut(j).iter_mut().zip(batch.hp.row(i)) {
                    *a += gt * b;
                }
            }
        }
    }
    Ok(LossGrad {
        loss: total(&ev.terms),
        d_hp,
        d_ht,
        d_hi,
        d_log_tau,
    })
}
