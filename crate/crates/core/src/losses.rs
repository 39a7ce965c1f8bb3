//! Training objectives.
//!
//! Each objective exists twice: a plain function over arrays, used for
//! evaluation and as a reference, and a tape builder in [`graph`] that the
//! trainer differentiates. Losses are means rather than sums so their scale
//! does not depend on utterance length, pair count or batch size.

use crate::alignment::FramePair;
use crate::autodiff::{cosine_slices, logsumexp};
use crate::models::BilinearScorer;
use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of the two half-utterance segments used for time-invariant
/// retrieval.
pub const HALF_SEGMENT_FRAMES: usize = 32;
/// Shortest utterance for which the more-than-half segment is drawn.
pub const MIN_WHOLE_SEGMENT_FRAMES: usize = 8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("vector lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no frame pairs given")]
    EmptyPairs,
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("batch shapes differ: {0:?} vs {1:?}")]
    BatchMismatch((usize, usize), (usize, usize)),
    #[error("style loss needs at least 2 utterances, got {0}")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: -0.1,
            lambda: 0.5,
        }
    }
}

/// Per-step loss values. Disabled terms are `None` and omitted from JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub recon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv_cls: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either input had (near) zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(LossError::LengthMismatch(a.len(), b.len()));
    }
    let (value, zero_norm) = cosine_slices(a, b);
    Ok(Cosine { value, zero_norm })
}

/// Mean over pairs of `coeff * cos(c_i, c_j)` with `coeff = -1` for
/// same-phoneme pairs and `+1` otherwise.
pub fn similarity_contrastive_loss(content: ArrayView2<f64>, pairs: &[FramePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(LossError::EmptyPairs);
    }
    let t = content.nrows();
    let mut acc = 0.0;
    for p in pairs {
        for index in [p.i, p.j] {
            if index >= t {
                return Err(LossError::IndexOutOfRange { index, len: t });
            }
        }
        let (ri, rj) = (content.row(p.i), content.row(p.j));
        let g = cosine_slices(&ri.to_vec(), &rj.to_vec()).0;
        acc += if p.same_phoneme { -g } else { g };
    }
    Ok(acc / pairs.len() as f64)
}

/// `-log softmax(logits)[true_speaker]`
pub fn adversarial_classifier_loss(logits: ArrayView1<f64>, true_speaker: usize) -> Result<f64> {
    if true_speaker >= logits.len() {
        return Err(LossError::IndexOutOfRange {
            index: true_speaker,
            len: logits.len(),
        });
    }
    Ok(logsumexp(logits.iter().copied()) - logits[true_speaker])
}

/// InfoNCE estimate from a score matrix `f(u_i, v_j)`:
/// `mean_i [ s_ii - log((1/N) sum_j exp s_ij) ]`, never above `ln N`.
pub fn infonce_from_scores(scores: ArrayView2<f64>) -> f64 {
    let n = scores.nrows();
    let ln_n = (n as f64).ln();
    let total: f64 = (0..n)
        .map(|i| scores[[i, i]] - logsumexp(scores.row(i).iter().copied()) + ln_n)
        .sum();
    total / n as f64
}

/// InfoNCE lower bound between matched rows of `u` and `v`, scored by the
/// bilinear form `u_i^T W v_j`.
pub fn infonce(u: ArrayView2<f64>, v: ArrayView2<f64>, scorer: &BilinearScorer) -> Result<f64> {
    if u.dim() != v.dim() || u.nrows() == 0 {
        return Err(LossError::BatchMismatch(u.dim(), v.dim()));
    }
    if scorer.w.dim() != (u.ncols(), u.ncols()) {
        return Err(LossError::BatchMismatch(scorer.w.dim(), (u.ncols(), u.ncols())));
    }
    let scores = u.dot(&scorer.w).dot(&v.t());
    Ok(infonce_from_scores(scores.view()))
}

/// Mean squared error over all elements.
pub fn reconstruction_loss(x: ArrayView2<f64>, x_hat: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(LossError::ShapeMismatch(x.dim(), x_hat.dim()));
    }
    let n = x.len().max(1) as f64;
    Ok(x.iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Values of the four objectives; disabled ones are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub recon: f64,
    pub sim: Option<f64>,
    pub style: Option<f64>,
    pub adv_cls: Option<f64>,
}

/// `recon + alpha * sim + beta * style + lambda * adv_cls`, skipping
/// disabled terms.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    let check = |v: f64, name| {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LossError::NonFinite(name))
        }
    };
    let mut total = check(c.recon, "recon")?;
    if let Some(s) = c.sim {
        total += w.alpha * check(s, "sim")?;
    }
    if let Some(s) = c.style {
        total += w.beta * check(s, "style")?;
    }
    if let Some(a) = c.adv_cls {
        total += w.lambda * check(a, "adv_cls")?;
    }
    Ok(total)
}

/// A contiguous frame window `[start, start + len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameWindow {
    pub start: usize,
    pub len: usize,
}

impl FrameWindow {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

/// Segments cut from one utterance for time-invariant retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub total_frames: usize,
    /// 32 frames from the first half.
    pub seg1: Option<FrameWindow>,
    /// 32 frames from the second half.
    pub seg2: Option<FrameWindow>,
    /// More than half of the utterance.
    pub seg3: Option<FrameWindow>,
}

pub fn sample_segments<R: Rng>(total_frames: usize, rng: &mut R) -> SegmentSpec {
    let t = total_frames;
    let half = t / 2;
    let (seg1, seg2) = if t >= 2 * HALF_SEGMENT_FRAMES {
        let s1 = rng.gen_range(0..=half - HALF_SEGMENT_FRAMES);
        let s2 = rng.gen_range(half..=t - HALF_SEGMENT_FRAMES);
        (
            Some(FrameWindow {
                start: s1,
                len: HALF_SEGMENT_FRAMES,
            }),
            Some(FrameWindow {
                start: s2,
                len: HALF_SEGMENT_FRAMES,
            }),
        )
    } else {
        (None, None)
    };
    let seg3 = (t >= MIN_WHOLE_SEGMENT_FRAMES).then(|| {
        let len = rng.gen_range(half + 1..=t);
        let start = rng.gen_range(0..=t - len);
        FrameWindow { start, len }
    });
    SegmentSpec {
        total_frames: t,
        seg1,
        seg2,
        seg3,
    }
}

/// Tape builders for the objectives.
pub mod graph {
    use crate::autodiff::{Tape, Var};
    use ndarray::Array2;
    use std::rc::Rc;

    /// Contrastive similarity loss over pairs given as absolute row indices
    /// of `content`.
    pub fn similarity(tape: &mut Tape, content: Var, pairs: &[(usize, usize, bool)]) -> Var {
        let left = Rc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let right = Rc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let a = tape.gather(content, left);
        let b = tape.gather(content, right);
        let cos = tape.cosine_rows(a, b);
        let coeff = Array2::from_shape_fn((pairs.len(), 1), |(k, _)| {
            if pairs[k].2 {
                -1.0
            } else {
                1.0
            }
        });
        let coeff = tape.leaf(coeff);
        let signed = tape.mul(cos, coeff);
        tape.mean_all(signed)
    }

    /// Mean cross-entropy of `logits` (`n x K`) against `targets`.
    pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
        let lse = tape.logsumexp_rows(logits);
        let picked = tape.pick_cols(logits, Rc::new(targets.to_vec()));
        let nll = tape.sub(lse, picked);
        tape.mean_all(nll)
    }

    /// InfoNCE between matched rows of `u` and `v` with scorer matrix `w`.
    pub fn infonce(tape: &mut Tape, u: Var, v: Var, w: Var) -> Var {
        let n = tape.shape(u).0;
        let uw = tape.matmul(u, w);
        let scores = tape.matmul_nt(uw, v);
        let lse = tape.logsumexp_rows(scores);
        let diag = tape.pick_cols(scores, Rc::new((0..n).collect()));
        let per_row = tape.sub(diag, lse);
        let mean = tape.mean_all(per_row);
        let ln_n = tape.constant_scalar((n as f64).ln());
        tape.add(mean, ln_n)
    }

    /// Embeddings of the retrieval segments, one row per utterance.
    #[derive(Debug, Clone, Copy)]
    pub struct StyleEmbeddings {
        /// (seg1, seg2) rows, present when at least two utterances have them.
        pub halves: Option<(Var, Var)>,
        /// (whole utterance, seg3) rows.
        pub whole: Option<(Var, Var)>,
    }

    /// Sum of the four InfoNCE terms, each against a stop-gradient copy of
    /// its partner.
    pub fn style(tape: &mut Tape, emb: &StyleEmbeddings, w: Var) -> Option<Var> {
        let mut terms = Vec::new();
        for (a, b) in emb.halves.iter().chain(emb.whole.iter()) {
            let (sa, sb) = (tape.detach(*a), tape.detach(*b));
            terms.push(infonce(tape, *a, sb, w));
            terms.push(infonce(tape, *b, sa, w));
        }
        let mut it = terms.into_iter();
        let first = it.next()?;
        Some(it.fold(first, |acc, t| tape.add(acc, t)))
    }

    /// Mean squared error against a constant target.
    pub fn reconstruction(tape: &mut Tape, prediction: Var, target: &Array2<f64>) -> Var {
        let t = tape.leaf(target.clone());
        let d = tape.sub(prediction, t);
        let sq = tape.square(d);
        tape.mean_all(sq)
    }
}
