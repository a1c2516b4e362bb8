//! Asymmetric cross-attention similarity between one image's visual
//! entities (global + four regions) and one caption's phrase embeddings.
//!
//! Image→text: each visual entity attends over the phrases and is scored
//! against its attention-pooled text vector; the pair score is the mean
//! over entities. Text→image mirrors the roles: each phrase attends over
//! the visual entities and is scored against its pooled visual vector,
//! averaged over the phrases actually present. The sentence-level text
//! embedding never enters here — region↔sentence alignment is deliberately
//! left out.
//!
//! Attention weights are softmaxes over normalized clamped cosines: raw
//! similarities are clamped at zero, then each column (image→text) or row
//! (text→image) is divided by its root sum of squares, with a small guard
//! added under the root so an all-negative column cannot divide 0 by 0.

use thiserror::Error;

use crate::corpus::{ImageEntity, TextEntity};
use crate::numerics::{cosine_s, softmax_s, weighted_sum_s, Cosine, Scalar, Vec64};

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("image dimension {img} does not match text dimension {txt}")]
    DimMismatch { img: usize, txt: usize },
    #[error("invalid attention config: {0}")]
    BadConfig(String),
}

/// Inverse temperatures and the normalization guard for both attention
/// directions. The two temperatures are independently configurable; both
/// default to 20.
#[derive(Debug, Clone, Copy)]
pub struct AttentionConfig {
    pub lambda1: f64,
    pub lambda1_prime: f64,
    pub eps_norm: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            lambda1: 20.0,
            lambda1_prime: 20.0,
            eps_norm: 1e-12,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), AlignmentError> {
        if !(self.lambda1 > 0.0) || !(self.lambda1_prime > 0.0) {
            return Err(AlignmentError::BadConfig(format!(
                "inverse temperatures must be positive, got {} and {}",
                self.lambda1, self.lambda1_prime
            )));
        }
        if !(self.eps_norm > 0.0 && self.eps_norm <= 1e-6) {
            return Err(AlignmentError::BadConfig(format!(
                "eps_norm must lie in (0, 1e-6], got {}",
                self.eps_norm
            )));
        }
        Ok(())
    }
}

/// One direction's score plus its per-entity or per-phrase terms.
#[derive(Debug, Clone)]
pub struct DirectionalScore {
    pub score: f64,
    pub terms: Vec<f64>,
}

/// Both directions for one (image, text) pair.
#[derive(Debug, Clone)]
pub struct PairSimilarity {
    /// Image→text score: mean of the per-entity terms.
    pub i2t: f64,
    /// Text→image score: mean of the per-phrase terms.
    pub t2i: f64,
    pub entity_terms: Vec<f64>,
    pub phrase_terms: Vec<f64>,
}

/// Raw entity–phrase similarity (plain cosine); identical formula in both
/// directions.
pub fn raw_similarity(v: &Vec64, t: &Vec64) -> Result<Cosine, AlignmentError> {
    if v.dim() != t.dim() {
        return Err(AlignmentError::DimMismatch {
            img: v.dim(),
            txt: t.dim(),
        });
    }
    let (value, degenerate) = cosine_s(v.as_slice(), t.as_slice());
    Ok(Cosine { value, degenerate })
}

// ---- generic kernels ---------------------------------------------------

/// Clamped raw cosine matrix, entities × phrases.
pub fn raw_matrix_s<S: Scalar>(entities: &[Vec<S>], phrases: &[Vec<S>]) -> Vec<Vec<S>> {
    entities
        .iter()
        .map(|v| {
            phrases
                .iter()
                .map(|t| cosine_s(v, t).0)
                .collect()
        })
        .collect()
}

fn clamped<S: Scalar>(raw: &[Vec<S>]) -> Vec<Vec<S>> {
    raw.iter()
        .map(|row| row.iter().map(|&s| s.relu()).collect())
        .collect()
}

/// Image→text from a precomputed raw similarity matrix.
pub fn score_i2t_from_raw<S: Scalar>(
    raw: &[Vec<S>],
    phrases: &[Vec<S>],
    entities: &[Vec<S>],
    cfg: &AttentionConfig,
) -> (S, Vec<S>) {
    let n_ent = entities.len();
    let n_phr = phrases.len();
    let c = clamped(raw);

    // Column-wise normalization over entities.
    let col_norm: Vec<S> = (0..n_phr)
        .map(|j| {
            let mut acc = c[0][j] * c[0][j];
            for row in c.iter().skip(1) {
                acc = acc + row[j] * row[j];
            }
            acc.shift(cfg.eps_norm).sqrt()
        })
        .collect();

    let mut terms = Vec::with_capacity(n_ent);
    for (i, v) in entities.iter().enumerate() {
        let stilde: Vec<S> = (0..n_phr).map(|j| c[i][j] / col_norm[j]).collect();
        let alpha = softmax_s(&stilde, cfg.lambda1);
        let pooled = weighted_sum_s(&alpha, phrases);
        terms.push(cosine_s(v, &pooled).0);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = total + t;
    }
    (total.scale(1.0 / n_ent as f64), terms)
}

/// Text→image from a precomputed raw similarity matrix: the symmetric
/// mirror of the image→text direction with entity and phrase roles
/// swapped.
pub fn score_t2i_from_raw<S: Scalar>(
    raw: &[Vec<S>],
    phrases: &[Vec<S>],
    entities: &[Vec<S>],
    cfg: &AttentionConfig,
) -> (S, Vec<S>) {
    let n_ent = entities.len();
    let n_phr = phrases.len();
    let c = clamped(raw);

    // Row-wise normalization over phrases.
    let row_norm: Vec<S> = (0..n_ent)
        .map(|i| {
            let mut acc = c[i][0] * c[i][0];
            for j in 1..n_phr {
                acc = acc + c[i][j] * c[i][j];
            }
            acc.shift(cfg.eps_norm).sqrt()
        })
        .collect();

    let mut terms = Vec::with_capacity(n_phr);
    for (j, t) in phrases.iter().enumerate() {
        let stilde: Vec<S> = (0..n_ent).map(|i| c[i][j] / row_norm[i]).collect();
        let alpha = softmax_s(&stilde, cfg.lambda1_prime);
        let pooled = weighted_sum_s(&alpha, entities);
        terms.push(cosine_s(t, &pooled).0);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = total + t;
    }
    (total.scale(1.0 / n_phr as f64), terms)
}

pub fn score_i2t_s<S: Scalar>(
    entities: &[Vec<S>],
    phrases: &[Vec<S>],
    cfg: &AttentionConfig,
) -> (S, Vec<S>) {
    let raw = raw_matrix_s(entities, phrases);
    score_i2t_from_raw(&raw, phrases, entities, cfg)
}

pub fn score_t2i_s<S: Scalar>(
    entities: &[Vec<S>],
    phrases: &[Vec<S>],
    cfg: &AttentionConfig,
) -> (S, Vec<S>) {
    let raw = raw_matrix_s(entities, phrases);
    score_t2i_from_raw(&raw, phrases, entities, cfg)
}

/// Both directions, sharing one raw similarity matrix.
pub fn score_pair_s<S: Scalar>(
    entities: &[Vec<S>],
    phrases: &[Vec<S>],
    cfg: &AttentionConfig,
) -> ((S, Vec<S>), (S, Vec<S>)) {
    let raw = raw_matrix_s(entities, phrases);
    (
        score_i2t_from_raw(&raw, phrases, entities, cfg),
        score_t2i_from_raw(&raw, phrases, entities, cfg),
    )
}

// ---- typed surface -------------------------------------------------------

fn check_pair(img: &ImageEntity, txt: &TextEntity, cfg: &AttentionConfig) -> Result<(), AlignmentError> {
    cfg.validate()?;
    if img.dim() != txt.dim() {
        return Err(AlignmentError::DimMismatch {
            img: img.dim(),
            txt: txt.dim(),
        });
    }
    Ok(())
}

fn entity_vecs(img: &ImageEntity) -> Vec<Vec<f64>> {
    img.entities()
        .into_iter()
        .map(|v| v.as_slice().to_vec())
        .collect()
}

fn phrase_vecs(txt: &TextEntity) -> Vec<Vec<f64>> {
    txt.phrases.iter().map(|p| p.as_slice().to_vec()).collect()
}

pub fn score_i2t(
    img: &ImageEntity,
    txt: &TextEntity,
    cfg: &AttentionConfig,
) -> Result<DirectionalScore, AlignmentError> {
    check_pair(img, txt, cfg)?;
    let (score, terms) = score_i2t_s(&entity_vecs(img), &phrase_vecs(txt), cfg);
    Ok(DirectionalScore { score, terms })
}

pub fn score_t2i(
    img: &ImageEntity,
    txt: &TextEntity,
    cfg: &AttentionConfig,
) -> Result<DirectionalScore, AlignmentError> {
    check_pair(img, txt, cfg)?;
    let (score, terms) = score_t2i_s(&entity_vecs(img), &phrase_vecs(txt), cfg);
    Ok(DirectionalScore { score, terms })
}

pub fn score_pair(
    img: &ImageEntity,
    txt: &TextEntity,
    cfg: &AttentionConfig,
) -> Result<PairSimilarity, AlignmentError> {
    check_pair(img, txt, cfg)?;
    let ((i2t, entity_terms), (t2i, phrase_terms)) =
        score_pair_s(&entity_vecs(img), &phrase_vecs(txt), cfg);
    Ok(PairSimilarity {
        i2t,
        t2i,
        entity_terms,
        phrase_terms,
    })
}
