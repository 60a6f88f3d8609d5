//! Contrastive KL objectives over in-batch candidates.
//!
//! Every loss here compares a softmax over an anchor's candidate scores
//! with a ground-truth distribution that spreads its mass uniformly over
//! the anchor's in-batch positives.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Relation, Triple};
use crate::model::{score_matrix, BoundModel, DistanceMode};

/// Which side of the KL divergence holds the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlOrientation {
    /// `KL(q ‖ p)`: finite for any model distribution.
    TruthFirst,
    /// `KL(p ‖ q)`, with `q` smoothed by
    /// [`TARGET_SMOOTHING`] so that negatives keep finite log-ratios.
    ModelFirst,
}

pub const TARGET_SMOOTHING: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub tau: f64,
    pub distance: DistanceMode,
    pub orientation: KlOrientation,
    /// Add the reverse-triplet direction to the triplet loss.
    pub reverse_triplets: bool,
    /// Learned log-scale `s`: logits become `exp(s)·scores` and `tau` is
    /// ignored.
    pub logit_scale: Option<Var>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            tau: 1.0,
            distance: DistanceMode::Cosine,
            orientation: KlOrientation::TruthFirst,
            reverse_triplets: true,
            logit_scale: None,
        }
    }
}

/// Anchor × candidate positive pairing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PositiveMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PositiveMask {
    pub fn new(rows: usize, cols: usize, positive: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(positive(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Anchor `i` and candidate `j` are positive when they carry the same key.
    pub fn from_keys<K: PartialEq>(anchor_keys: &[K], candidate_keys: &[K]) -> Self {
        Self::new(anchor_keys.len(), candidate_keys.len(), |i, j| {
            anchor_keys[i] == candidate_keys[j]
        })
    }

    /// `(h_i, r, t_j)` is positive when the graph contains it. Every batch
    /// triple is its own positive, and tails shared by several heads count
    /// for all of them.
    pub fn for_triples(graph: &KnowledgeGraph, batch: &[Triple]) -> Self {
        let n = batch.len();
        Self::new(n, n, |i, j| {
            i == j || {
                let (a, b) = (&batch[i], &batch[j]);
                a.relation == b.relation
                    && graph.contains(&Triple {
                        head: a.head.clone(),
                        relation: a.relation,
                        tail: b.tail.clone(),
                    })
            }
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        Self::new(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Uniform mass over each row's positives.
    pub fn ground_truth(&self) -> Result<Tensor> {
        let mut data = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            let k = (0..self.cols).filter(|&j| self.get(i, j)).count();
            if k == 0 {
                return Err(Error::Data(format!("anchor {i} has no positive candidate")));
            }
            for j in 0..self.cols {
                if self.get(i, j) {
                    data[i * self.cols + j] = 1.0 / k as f64;
                }
            }
        }
        Tensor::new([self.rows, self.cols], data)
    }
}

/// Batch-averaged KL between the ground truth and `softmax(scores / τ)`
/// (or `softmax(exp(s)·scores)` with a learned scale), one row per anchor.
pub fn contrastive_kl(tape: &mut Tape, scores: Var, mask: &PositiveMask, opts: &LossOptions) -> Result<Var> {
    if tape.shape(scores) != [mask.rows, mask.cols] {
        return Err(Error::shape("contrastive_kl", tape.shape(scores), &[mask.rows, mask.cols]));
    }
    let q = mask.ground_truth()?;
    let logits = match opts.logit_scale {
        Some(s) => {
            let factor = tape.exp(s);
            tape.scale_by(scores, factor)?
        }
        None => {
            if !(opts.tau > 0.0) || !opts.tau.is_finite() {
                return Err(Error::Config(format!("temperature must be positive, got {}", opts.tau)));
            }
            tape.scale(scores, 1.0 / opts.tau)
        }
    };
    let p = tape.softmax(logits, 1)?;
    let kl = match opts.orientation {
        KlOrientation::TruthFirst => {
            let q = tape.constant(q);
            tape.kl_divergence(q, p)?
        }
        KlOrientation::ModelFirst => {
            let n = mask.cols as f64;
            let smoothed = q.map(|v| (1.0 - TARGET_SMOOTHING) * v + TARGET_SMOOTHING / n);
            let q = tape.constant(smoothed);
            tape.kl_divergence(p, q)?
        }
    };
    Ok(tape.mean_all(kl))
}

fn check_batch(op: &str, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Data(format!("{op} needs a batch of at least 2, got {n}")));
    }
    Ok(())
}

/// Symmetric in-batch contrast between raw embeddings (cosine scores):
/// `½·[KL(anchor → candidates) + KL(candidate → anchors)]`.
pub fn mm_contrastive_loss(
    tape: &mut Tape,
    anchors: Var,
    candidates: Var,
    positives: &PositiveMask,
    opts: &LossOptions,
) -> Result<Var> {
    check_batch("mm_contrastive_loss", tape.shape(anchors)[0])?;
    let s = score_matrix(tape, anchors, candidates, DistanceMode::Cosine)?;
    let forward = contrastive_kl(tape, s, positives, opts)?;
    let st = tape.transpose(s)?;
    let backward = contrastive_kl(tape, st, &positives.transpose(), opts)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5))
}

/// Triplet contrast for a batch of `(h_i, r, t_i)` rows given as `[B, d]`
/// head and tail embeddings.
///
/// Forward: compensated heads against the projected tails of every batch
/// member. Reverse (when enabled): the triplets `(t_i, r⁻¹, h_i)` run
/// through the encoder and are contrasted the same way with the transposed
/// pairing. With both directions the result is their mean.
pub fn triplet_kl_loss(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    relation: Relation,
    heads: Var,
    tails: Var,
    positives: &PositiveMask,
    opts: &LossOptions,
) -> Result<Var> {
    let b = tape.shape(heads)[0];
    check_batch("triplet_kl_loss", b)?;
    let rels = vec![relation; b];
    let fwd = model.pair(tape, heads, &rels, tails)?;
    let s = score_matrix(tape, fwd.head, fwd.tail, opts.distance)?;
    let forward = contrastive_kl(tape, s, positives, opts)?;
    if !opts.reverse_triplets {
        return Ok(forward);
    }
    let rev_rels = vec![relation.reverse(); b];
    let rev = model.pair(tape, tails, &rev_rels, heads)?;
    let s = score_matrix(tape, rev.head, rev.tail, opts.distance)?;
    let backward = contrastive_kl(tape, s, &positives.transpose(), opts)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, 0.5))
}

/// Loss terms of one relation; a disabled term is `None`.
#[derive(Debug, Clone, Copy)]
pub struct RelationLosses {
    pub relation: Relation,
    pub triplet: Option<Var>,
    pub mm: Option<Var>,
}

/// `Σ_r (L_tri,r + λ·L_mm,r)`. Components are already batch-averaged, so
/// no further division by the sample count happens here.
pub fn total_loss(tape: &mut Tape, terms: &[RelationLosses], lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut parts = Vec::new();
    for t in terms {
        if let Some(tri) = t.triplet {
            parts.push(tri);
        }
        if let (Some(mm), true) = (t.mm, lambda > 0.0) {
            parts.push(tape.scale(mm, lambda));
        }
    }
    let mut acc = *parts
        .first()
        .ok_or_else(|| Error::Config("every loss term is disabled".into()))?;
    for &p in &parts[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}
