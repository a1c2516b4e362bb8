//! Training objectives.
//!
//! Global scale: the cross-modal projection matching loss (CMPM, a KL
//! divergence between projection-softmax and label distributions) and the
//! cross-modal projection classification loss (CMPC, norm-softmax identity
//! classification of projected features). Cross scale: a KL matching loss
//! over the batch matrix of cross-attention pair similarities, one term
//! per direction. The weighted total is
//!
//! `total = cmpm + mu * cmpc + gamma * (cross_i2t + cross_t2i)`
//!
//! and every term can be recorded on a [`Tape`] so one backward pass
//! yields gradients for all trainable parameters: the four region
//! projections, the text-side linear adapter, and the identity class
//! weights.

pub mod gradcheck;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{score_pair_s, AlignmentError, AttentionConfig};
use crate::corpus::{CorpusError, ImageEntity, MatchLabels, TextEntity};
use crate::numerics::{
    dot_s, lift, matvec_s, Mat64, NumericsError, Scalar, Tape, Var, Vec64,
};
use crate::partition::{partition, region_bands_s, RegionProjection, REGION_COUNT};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch sides differ: {images} images vs {texts} texts")]
    BatchMismatch { images: usize, texts: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("pair {index}: image identity {img} != text identity {txt}")]
    PairMismatch { index: usize, img: u32, txt: u32 },
    #[error("entity dimensions are inconsistent within the batch")]
    DimMismatch,
    #[error("{side} embedding {index} has zero norm")]
    DegenerateEmbedding { side: &'static str, index: usize },
    #[error("identity {identity} is outside the {n_classes} class-weight columns")]
    UnknownIdentity { identity: u32, n_classes: usize },
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error("labels do not match the score matrix: {0}")]
    LabelShape(String),
    #[error("loss became non-finite: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Term weights and numeric guards for the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the classification loss.
    pub mu: f64,
    /// Weight of the cross-scale matching loss.
    pub gamma: f64,
    /// Guard added to label probabilities inside every KL log ratio.
    pub eps_kl: f64,
    /// Logit scale inside the projection softmaxes (CMPM and CMPC); 1
    /// reproduces the plain formulas.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mu: 4.0,
            gamma: 0.1,
            eps_kl: 1e-8,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.mu < 0.0 || self.gamma < 0.0 {
            return Err(LossError::BadWeights(format!(
                "mu and gamma must be non-negative, got {} and {}",
                self.mu, self.gamma
            )));
        }
        if !(self.eps_kl > 0.0 && self.eps_kl <= 1e-6) {
            return Err(LossError::BadWeights(format!(
                "eps_kl must lie in (0, 1e-6], got {}",
                self.eps_kl
            )));
        }
        if !(self.lambda2 > 0.0) {
            return Err(LossError::BadWeights(format!(
                "lambda2 must be positive, got {}",
                self.lambda2
            )));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation of the total objective.
#[derive(Debug, Clone, Copy)]
pub struct LossReport {
    pub cmpm: f64,
    pub cmpc: f64,
    pub cross_i2t: f64,
    pub cross_t2i: f64,
    /// `cross_i2t + cross_t2i`.
    pub cross_scale: f64,
    pub total: f64,
    /// Rows/columns of the cross-scale matrices whose clamped similarities
    /// were all zero; they contribute nothing to the loss.
    pub degenerate_lines: usize,
}

// ---- trainable parameters ---------------------------------------------

/// Everything the toy trainer moves: per-region projections, the d×d
/// adapter applied to text globals and phrases, and one class-weight
/// column per identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Params {
    pub region_proj: RegionProjection,
    pub text_adapter: Mat64,
    /// d × n_classes; column c scores identity c after L2 normalization.
    pub class_weights: Mat64,
}

impl Params {
    /// Identity-initialized projections/adapter and small random class
    /// weights (they are normalized in use, so only direction matters).
    pub fn init(dim: usize, n_classes: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut class_weights = Mat64::zeros(dim, n_classes);
        for v in class_weights.as_mut_slice() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        Self {
            region_proj: RegionProjection::identity(dim),
            text_adapter: Mat64::identity(dim),
            class_weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.text_adapter.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_weights.cols()
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            dim: self.dim(),
            n_classes: self.n_classes(),
        }
    }

    /// Flat parameter vector: 4 × (projection weights, bias), adapter,
    /// class weights, all row-major. Gradient vectors share this layout.
    pub fn to_flat(&self) -> Vec<f64> {
        let proj = self
            .region_proj
            .params()
            .expect("trainable params require an enabled projection");
        let mut flat = Vec::with_capacity(self.layout().total_len());
        for r in 0..REGION_COUNT {
            flat.extend_from_slice(proj.weights[r].as_slice());
            flat.extend_from_slice(proj.biases[r].as_slice());
        }
        flat.extend_from_slice(self.text_adapter.as_slice());
        flat.extend_from_slice(self.class_weights.as_slice());
        flat
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let layout = self.layout();
        assert_eq!(flat.len(), layout.total_len(), "flat parameter length");
        let d = layout.dim;
        let proj = self
            .region_proj
            .params_mut()
            .expect("trainable params require an enabled projection");
        let mut ofs = 0;
        for r in 0..REGION_COUNT {
            proj.weights[r]
                .as_mut_slice()
                .copy_from_slice(&flat[ofs..ofs + d * d]);
            ofs += d * d;
            let bias = Vec64::new(flat[ofs..ofs + d].to_vec()).expect("finite bias");
            proj.biases[r] = bias;
            ofs += d;
        }
        self.text_adapter
            .as_mut_slice()
            .copy_from_slice(&flat[ofs..ofs + d * d]);
        ofs += d * d;
        self.class_weights
            .as_mut_slice()
            .copy_from_slice(&flat[ofs..]);
    }
}

/// Offsets of the flat parameter layout.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub dim: usize,
    pub n_classes: usize,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        let d = self.dim;
        REGION_COUNT * (d * d + d) + d * d + d * self.n_classes
    }

    fn carve<S: Scalar>(&self, flat: &[S]) -> LiftedParams<S> {
        let d = self.dim;
        assert_eq!(flat.len(), self.total_len());
        let mut ofs = 0;
        let mut proj_w = Vec::with_capacity(REGION_COUNT);
        let mut proj_b = Vec::with_capacity(REGION_COUNT);
        for _ in 0..REGION_COUNT {
            proj_w.push(flat[ofs..ofs + d * d].to_vec());
            ofs += d * d;
            proj_b.push(flat[ofs..ofs + d].to_vec());
            ofs += d;
        }
        let adapter = flat[ofs..ofs + d * d].to_vec();
        ofs += d * d;
        // Row-major d × C: column c gathers stride-C elements.
        let class_cols = (0..self.n_classes)
            .map(|c| (0..d).map(|i| flat[ofs + i * self.n_classes + c]).collect())
            .collect();
        LiftedParams {
            dim: d,
            proj_w,
            proj_b,
            adapter,
            class_cols,
        }
    }
}

struct LiftedParams<S> {
    dim: usize,
    proj_w: Vec<Vec<S>>,
    proj_b: Vec<Vec<S>>,
    adapter: Vec<S>,
    class_cols: Vec<Vec<S>>,
}

// ---- batch ---------------------------------------------------------------

/// A loss batch of N matched (image, text) pairs: pair a shares one
/// identity, which guarantees every label row and column has a positive.
#[derive(Debug)]
pub struct Batch<'a> {
    pub images: Vec<&'a ImageEntity>,
    pub texts: Vec<&'a TextEntity>,
    pub labels: MatchLabels,
    pub identities: Vec<u32>,
}

impl<'a> Batch<'a> {
    pub fn from_matched_pairs(
        images: Vec<&'a ImageEntity>,
        texts: Vec<&'a TextEntity>,
    ) -> Result<Self, LossError> {
        if images.len() != texts.len() {
            return Err(LossError::BatchMismatch {
                images: images.len(),
                texts: texts.len(),
            });
        }
        if images.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        let dim = images[0].dim();
        for (index, (img, txt)) in images.iter().zip(&texts).enumerate() {
            if img.identity != txt.identity {
                return Err(LossError::PairMismatch {
                    index,
                    img: img.identity,
                    txt: txt.identity,
                });
            }
            if img.dim() != dim || txt.dim() != dim {
                return Err(LossError::DimMismatch);
            }
        }
        let img_ids: Vec<u32> = images.iter().map(|i| i.identity).collect();
        let txt_ids: Vec<u32> = texts.iter().map(|t| t.identity).collect();
        let labels = MatchLabels::from_identities(&img_ids, &txt_ids);
        Ok(Self {
            images,
            texts,
            labels,
            identities: img_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }
}

// ---- generic kernels -----------------------------------------------------

fn normalized<S: Scalar>(v: &[S], side: &'static str, index: usize) -> Result<Vec<S>, LossError> {
    let sq = dot_s(v, v);
    if sq.value() == 0.0 {
        return Err(LossError::DegenerateEmbedding { side, index });
    }
    let norm = sq.sqrt();
    Ok(v.iter().map(|&x| x / norm).collect())
}

/// KL(p || q+eps) for one softmax row against a constant label row;
/// `Σ_b p_b (ln p_b - ln(q_b + eps))`.
fn kl_row<S: Scalar>(p: &[S], q: &[f64], eps: f64) -> S {
    debug_assert_eq!(p.len(), q.len());
    let mut acc: Option<S> = None;
    for (pb, &qb) in p.iter().zip(q) {
        let term = *pb * pb.ln().shift(-(qb + eps).ln());
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    acc.expect("non-empty row")
}

/// CMPM over one direction: softmax projections of `queries` onto
/// normalized `candidates`, KL against `q_rows`.
fn cmpm_direction<S: Scalar>(
    queries: &[Vec<S>],
    candidates: &[Vec<S>],
    q_rows: &[Vec<f64>],
    eps_kl: f64,
    lambda2: f64,
    candidate_side: &'static str,
) -> Result<S, LossError> {
    let n = queries.len();
    let normalized_candidates: Vec<Vec<S>> = candidates
        .iter()
        .enumerate()
        .map(|(index, z)| normalized(z, candidate_side, index))
        .collect::<Result<_, _>>()?;
    let mut acc: Option<S> = None;
    for (a, x) in queries.iter().enumerate() {
        let logits: Vec<S> = normalized_candidates
            .iter()
            .map(|z| dot_s(x, z))
            .collect();
        let p = crate::numerics::softmax_s(&logits, lambda2);
        let row = kl_row(&p, &q_rows[a], eps_kl);
        acc = Some(match acc {
            Some(t) => t + row,
            None => row,
        });
    }
    Ok(acc.expect("non-empty batch").scale(1.0 / n as f64))
}

fn cmpm_s<S: Scalar>(
    img_globals: &[Vec<S>],
    txt_globals: &[Vec<S>],
    labels: &MatchLabels,
    eps_kl: f64,
    lambda2: f64,
) -> Result<S, LossError> {
    let n = img_globals.len();
    if n != txt_globals.len() {
        return Err(LossError::BatchMismatch {
            images: n,
            texts: txt_globals.len(),
        });
    }
    if labels.n_img() != n || labels.n_txt() != n {
        return Err(LossError::LabelShape(format!(
            "labels {}x{} vs batch {n}",
            labels.n_img(),
            labels.n_txt()
        )));
    }
    let q_img: Vec<Vec<f64>> = (0..n)
        .map(|a| {
            labels.row_q(a).ok_or(CorpusError::MissingPositive {
                side: "image",
                id: a.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    let q_txt: Vec<Vec<f64>> = (0..n)
        .map(|b| {
            labels.col_q(b).ok_or(CorpusError::MissingPositive {
                side: "text",
                id: b.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    let fwd = cmpm_direction(img_globals, txt_globals, &q_img, eps_kl, lambda2, "text")?;
    let bwd = cmpm_direction(txt_globals, img_globals, &q_txt, eps_kl, lambda2, "image")?;
    Ok(fwd + bwd)
}

/// One CMPC direction: project `features` onto their normalized matched
/// partners, classify against normalized class columns.
fn cmpc_direction<S: Scalar>(
    features: &[Vec<S>],
    partners: &[Vec<S>],
    identities: &[u32],
    class_cols: &[Vec<S>],
    lambda2: f64,
    partner_side: &'static str,
) -> Result<S, LossError> {
    let n = features.len();
    let normalized_cols: Vec<Vec<S>> = class_cols
        .iter()
        .enumerate()
        .map(|(index, w)| normalized(w, "class weight", index))
        .collect::<Result<_, _>>()?;
    let mut acc: Option<S> = None;
    for a in 0..n {
        let partner_hat = normalized(&partners[a], partner_side, a)?;
        let coeff = dot_s(&features[a], &partner_hat);
        let projected: Vec<S> = partner_hat.iter().map(|&z| z * coeff).collect();
        let logits: Vec<S> = normalized_cols
            .iter()
            .map(|w| dot_s(&projected, w))
            .collect();
        let sm = crate::numerics::softmax_s(&logits, lambda2);
        let term = -sm[identities[a] as usize].ln();
        acc = Some(match acc {
            Some(t) => t + term,
            None => term,
        });
    }
    Ok(acc.expect("non-empty batch").scale(1.0 / n as f64))
}

fn cmpc_s<S: Scalar>(
    img_globals: &[Vec<S>],
    txt_globals: &[Vec<S>],
    identities: &[u32],
    class_cols: &[Vec<S>],
    lambda2: f64,
) -> Result<S, LossError> {
    let n = img_globals.len();
    if n != txt_globals.len() || n != identities.len() {
        return Err(LossError::BatchMismatch {
            images: n,
            texts: txt_globals.len(),
        });
    }
    let n_classes = class_cols.len();
    if let Some(&identity) = identities.iter().find(|&&i| i as usize >= n_classes) {
        return Err(LossError::UnknownIdentity {
            identity,
            n_classes,
        });
    }
    let img_dir = cmpc_direction(img_globals, txt_globals, identities, class_cols, lambda2, "text")?;
    let txt_dir = cmpc_direction(txt_globals, img_globals, identities, class_cols, lambda2, "image")?;
    Ok(img_dir + txt_dir)
}

/// Cross-scale matching loss terms over clamped similarity matrices.
struct CrossScaleTerms<S> {
    i2t: S,
    t2i: S,
    degenerate_lines: usize,
}

/// `p = [S]+ / (Σ [S]+ + eps)` down one line of a similarity matrix,
/// then `Σ p ln(p / (q + eps))` with `0 · ln(0/·) ≡ 0`.
fn cross_scale_line<S: Scalar>(scores: &[S], q: &[f64], eps: f64, zero: S) -> (S, bool) {
    let clamped: Vec<S> = scores.iter().map(|&s| s.relu()).collect();
    let mut denom = clamped[0];
    for &c in &clamped[1..] {
        denom = denom + c;
    }
    if denom.value() == 0.0 {
        // Every similarity clamped away: the line contributes nothing.
        return (zero, true);
    }
    let denom = denom.shift(eps);
    let mut acc: Option<S> = None;
    for (c, &qb) in clamped.iter().zip(q) {
        if c.value() == 0.0 {
            continue;
        }
        let p = *c / denom;
        let term = p * p.ln().shift(-(qb + eps).ln());
        acc = Some(match acc {
            Some(t) => t + term,
            None => term,
        });
    }
    (acc.unwrap_or(zero), false)
}

fn cross_scale_s<S: Scalar>(
    ctx: S::Ctx,
    s_i2t: &[Vec<S>],
    s_t2i: &[Vec<S>],
    labels: &MatchLabels,
    eps_kl: f64,
) -> Result<CrossScaleTerms<S>, LossError> {
    let n = s_i2t.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if labels.n_img() != n || labels.n_txt() != n || s_t2i.len() != n {
        return Err(LossError::LabelShape(format!(
            "expected square {n}x{n} matrices matching labels {}x{}",
            labels.n_img(),
            labels.n_txt()
        )));
    }
    let zero = S::constant(ctx, 0.0);
    let mut degenerate_lines = 0usize;

    // Image→text: rows of the i2t matrix against row-normalized labels.
    let mut i2t_acc: Option<S> = None;
    for a in 0..n {
        let q = labels.row_q(a).ok_or_else(|| {
            LossError::LabelShape(format!("image row {a} has no positive"))
        })?;
        let (line, degenerate) = cross_scale_line(&s_i2t[a], &q, eps_kl, zero);
        if degenerate {
            degenerate_lines += 1;
        }
        i2t_acc = Some(match i2t_acc {
            Some(t) => t + line,
            None => line,
        });
    }

    // Text→image: columns of the t2i matrix against column-normalized
    // labels.
    let mut t2i_acc: Option<S> = None;
    for b in 0..n {
        let q = labels.col_q(b).ok_or_else(|| {
            LossError::LabelShape(format!("text column {b} has no positive"))
        })?;
        let col: Vec<S> = (0..n).map(|a| s_t2i[a][b]).collect();
        let (line, degenerate) = cross_scale_line(&col, &q, eps_kl, zero);
        if degenerate {
            degenerate_lines += 1;
        }
        t2i_acc = Some(match t2i_acc {
            Some(t) => t + line,
            None => line,
        });
    }

    Ok(CrossScaleTerms {
        i2t: i2t_acc.expect("n > 0").scale(1.0 / n as f64),
        t2i: t2i_acc.expect("n > 0").scale(1.0 / n as f64),
        degenerate_lines,
    })
}

// ---- public f64 operations -------------------------------------------

/// CMPM over a batch of global embeddings, both directions summed.
/// Logit scale fixed at 1; the weighted total exposes `lambda2`.
pub fn cmpm_loss(
    img_globals: &[Vec64],
    txt_globals: &[Vec64],
    labels: &MatchLabels,
    eps_kl: f64,
) -> Result<f64, LossError> {
    let xs: Vec<Vec<f64>> = img_globals.iter().map(|v| v.as_slice().to_vec()).collect();
    let zs: Vec<Vec<f64>> = txt_globals.iter().map(|v| v.as_slice().to_vec()).collect();
    cmpm_s(&xs, &zs, labels, eps_kl, 1.0)
}

/// CMPC over a batch of matched global embeddings, both directions summed.
pub fn cmpc_loss(
    img_globals: &[Vec64],
    txt_globals: &[Vec64],
    identities: &[u32],
    class_weights: &Mat64,
) -> Result<f64, LossError> {
    let xs: Vec<Vec<f64>> = img_globals.iter().map(|v| v.as_slice().to_vec()).collect();
    let zs: Vec<Vec<f64>> = txt_globals.iter().map(|v| v.as_slice().to_vec()).collect();
    let layout = ParamLayout {
        dim: class_weights.rows(),
        n_classes: class_weights.cols(),
    };
    let cols: Vec<Vec<f64>> = (0..layout.n_classes)
        .map(|c| (0..layout.dim).map(|i| class_weights.get(i, c)).collect())
        .collect();
    cmpc_s(&xs, &zs, identities, &cols, 1.0)
}

/// Value of the cross-scale KL matching loss from precomputed pair-score
/// matrices (image rows × text columns, as produced by
/// [`pairwise_scores`]).
#[derive(Debug, Clone, Copy)]
pub struct CrossScaleLoss {
    pub i2t: f64,
    pub t2i: f64,
    pub total: f64,
    pub degenerate_lines: usize,
}

pub fn cross_scale_loss(
    s_i2t: &[Vec<f64>],
    s_t2i: &[Vec<f64>],
    labels: &MatchLabels,
    eps_kl: f64,
) -> Result<CrossScaleLoss, LossError> {
    let terms = cross_scale_s((), s_i2t, s_t2i, labels, eps_kl)?;
    Ok(CrossScaleLoss {
        i2t: terms.i2t,
        t2i: terms.t2i,
        total: terms.i2t + terms.t2i,
        degenerate_lines: terms.degenerate_lines,
    })
}

/// Attention pair scores for every (image, text) combination of a batch:
/// `(i2t, t2i)` matrices with image rows and text columns.
pub fn pairwise_scores(
    images: &[&ImageEntity],
    texts: &[&TextEntity],
    cfg: &AttentionConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), LossError> {
    cfg.validate()?;
    let mut i2t = Vec::with_capacity(images.len());
    let mut t2i = Vec::with_capacity(images.len());
    for img in images {
        let entities: Vec<Vec<f64>> = img
            .entities()
            .into_iter()
            .map(|v| v.as_slice().to_vec())
            .collect();
        let mut i2t_row = Vec::with_capacity(texts.len());
        let mut t2i_row = Vec::with_capacity(texts.len());
        for txt in texts {
            let phrases: Vec<Vec<f64>> =
                txt.phrases.iter().map(|p| p.as_slice().to_vec()).collect();
            let ((si, _), (st, _)) = score_pair_s(&entities, &phrases, cfg);
            i2t_row.push(si);
            t2i_row.push(st);
        }
        i2t.push(i2t_row);
        t2i.push(t2i_row);
    }
    Ok((i2t, t2i))
}

// ---- total objective -----------------------------------------------------

struct TotalTerms<S> {
    cmpm: S,
    cmpc: S,
    cross_i2t: S,
    cross_t2i: S,
    total: S,
    degenerate_lines: usize,
}

/// The full pipeline on generic scalars: adapt texts, project regions,
/// score all pairs, evaluate every loss term.
fn total_terms<S: Scalar>(
    ctx: S::Ctx,
    batch: &Batch<'_>,
    cfg: &AttentionConfig,
    weights: &LossWeights,
    lp: &LiftedParams<S>,
) -> Result<TotalTerms<S>, LossError> {
    cfg.validate()?;
    weights.validate()?;
    let d = batch.dim();
    if lp.dim != d {
        return Err(LossError::DimMismatch);
    }

    let img_globals: Vec<Vec<S>> = batch
        .images
        .iter()
        .map(|img| lift(ctx, img.global.as_slice()))
        .collect();
    let txt_globals: Vec<Vec<S>> = batch
        .texts
        .iter()
        .map(|txt| matvec_s(&lp.adapter, d, d, &lift(ctx, txt.global.as_slice())))
        .collect();
    let phrase_sets: Vec<Vec<Vec<S>>> = batch
        .texts
        .iter()
        .map(|txt| {
            txt.phrases
                .iter()
                .map(|p| matvec_s(&lp.adapter, d, d, &lift(ctx, p.as_slice())))
                .collect()
        })
        .collect();
    let entity_sets: Vec<Vec<Vec<S>>> = batch
        .images
        .iter()
        .map(|img| {
            let slices: Vec<Vec<S>> = img
                .slices
                .iter()
                .map(|s| lift(ctx, s.as_slice()))
                .collect();
            let bands = region_bands_s(&slices);
            let mut entities = Vec::with_capacity(REGION_COUNT + 1);
            entities.push(lift(ctx, img.global.as_slice()));
            for (r, band) in bands.into_iter().enumerate() {
                let mut region = matvec_s(&lp.proj_w[r], d, d, &band);
                for (x, &b) in region.iter_mut().zip(&lp.proj_b[r]) {
                    *x = *x + b;
                }
                entities.push(region);
            }
            entities
        })
        .collect();

    let cmpm = cmpm_s(
        &img_globals,
        &txt_globals,
        &batch.labels,
        weights.eps_kl,
        weights.lambda2,
    )?;
    let cmpc = cmpc_s(
        &img_globals,
        &txt_globals,
        &batch.identities,
        &lp.class_cols,
        weights.lambda2,
    )?;

    let n = batch.len();
    let mut s_i2t: Vec<Vec<S>> = Vec::with_capacity(n);
    let mut s_t2i: Vec<Vec<S>> = Vec::with_capacity(n);
    for entities in &entity_sets {
        let mut i2t_row = Vec::with_capacity(n);
        let mut t2i_row = Vec::with_capacity(n);
        for phrases in &phrase_sets {
            let ((si, _), (st, _)) = score_pair_s(entities, phrases, cfg);
            i2t_row.push(si);
            t2i_row.push(st);
        }
        s_i2t.push(i2t_row);
        s_t2i.push(t2i_row);
    }
    let cross = cross_scale_s(ctx, &s_i2t, &s_t2i, &batch.labels, weights.eps_kl)?;

    let total =
        cmpm + cmpc.scale(weights.mu) + (cross.i2t + cross.t2i).scale(weights.gamma);
    Ok(TotalTerms {
        cmpm,
        cmpc,
        cross_i2t: cross.i2t,
        cross_t2i: cross.t2i,
        total,
        degenerate_lines: cross.degenerate_lines,
    })
}

fn report_from<S: Scalar>(terms: &TotalTerms<S>) -> LossReport {
    LossReport {
        cmpm: terms.cmpm.value(),
        cmpc: terms.cmpc.value(),
        cross_i2t: terms.cross_i2t.value(),
        cross_t2i: terms.cross_t2i.value(),
        cross_scale: terms.cross_i2t.value() + terms.cross_t2i.value(),
        total: terms.total.value(),
        degenerate_lines: terms.degenerate_lines,
    }
}

/// Evaluate the weighted total objective.
pub fn total_loss(
    batch: &Batch<'_>,
    cfg: &AttentionConfig,
    weights: &LossWeights,
    params: &Params,
) -> Result<LossReport, LossError> {
    let flat = params.to_flat();
    let lp = params.layout().carve(&flat);
    let terms = total_terms((), batch, cfg, weights, &lp)?;
    Ok(report_from(&terms))
}

/// Evaluate the total objective on a tape and return its gradient with
/// respect to every parameter, in [`Params::to_flat`] layout.
pub fn total_loss_with_grad(
    batch: &Batch<'_>,
    cfg: &AttentionConfig,
    weights: &LossWeights,
    params: &Params,
) -> Result<(LossReport, Vec<f64>), LossError> {
    let tape = Tape::new();
    let flat = params.to_flat();
    let leaves: Vec<Var<'_>> = flat.iter().map(|&x| tape.leaf(x)).collect();
    let lp = params.layout().carve(&leaves);
    let terms = total_terms(&tape, batch, cfg, weights, &lp)?;
    let grads = tape.backward(terms.total)?;
    Ok((report_from(&terms), grads.wrt_slice(&leaves)))
}

/// Transform corpus entities with trained parameters: regions are
/// re-derived through the region projections, text globals and phrases go
/// through the adapter. Image globals and slices are untouched.
pub fn apply_params(
    images: &[ImageEntity],
    texts: &[TextEntity],
    params: &Params,
) -> Result<(Vec<ImageEntity>, Vec<TextEntity>), LossError> {
    let mut out_images = Vec::with_capacity(images.len());
    for img in images {
        let regions = partition(&img.slices, &params.region_proj)
            .map_err(|e| LossError::BadConfig(e.to_string()))?;
        out_images.push(ImageEntity {
            id: img.id.clone(),
            identity: img.identity,
            global: img.global.clone(),
            slices: img.slices.clone(),
            regions: regions.to_vec(),
        });
    }
    let adapt = |v: &Vec64| -> Result<Vec64, LossError> {
        Vec64::new(params.text_adapter.matvec(v.as_slice())).map_err(LossError::from)
    };
    let mut out_texts = Vec::with_capacity(texts.len());
    for txt in texts {
        out_texts.push(TextEntity {
            id: txt.id.clone(),
            identity: txt.identity,
            global: adapt(&txt.global)?,
            phrases: txt
                .phrases
                .iter()
                .map(&adapt)
                .collect::<Result<Vec<_>, _>>()?,
        });
    }
    Ok((out_images, out_texts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vec64 {
        Vec64::new(xs.to_vec()).unwrap()
    }

    fn labels_diag(n: usize) -> MatchLabels {
        let ids: Vec<u32> = (0..n as u32).collect();
        MatchLabels::from_identities(&ids, &ids)
    }

    // Independent direct-formula CMPM: explicit exp/sum softmax, no shared
    // kernels.
    fn cmpm_oracle(xs: &[Vec<f64>], zs: &[Vec<f64>], y: &[Vec<bool>], eps: f64) -> f64 {
        let n = xs.len();
        let norm = |v: &[f64]| {
            let s: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let one_direction = |queries: &[Vec<f64>], cands: &[Vec<f64>], q_of: &dyn Fn(usize, usize) -> f64| {
            let hats: Vec<Vec<f64>> = cands.iter().map(|c| norm(c)).collect();
            let mut total = 0.0;
            for a in 0..n {
                let logits: Vec<f64> = hats
                    .iter()
                    .map(|h| queries[a].iter().zip(h).map(|(x, y)| x * y).sum())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                for b in 0..n {
                    let p = exps[b] / z;
                    total += p * (p / (q_of(a, b) + eps)).ln();
                }
            }
            total / n as f64
        };
        let row_count = |a: usize| y[a].iter().filter(|&&m| m).count() as f64;
        let col_count = |b: usize| (0..n).filter(|&a| y[a][b]).count() as f64;
        one_direction(xs, zs, &|a, b| if y[a][b] { 1.0 / row_count(a) } else { 0.0 })
            + one_direction(zs, xs, &|b, a| if y[a][b] { 1.0 / col_count(b) } else { 0.0 })
    }

    #[test]
    fn cmpm_single_pair_is_near_zero() {
        let labels = labels_diag(1);
        let loss = cmpm_loss(&[v(&[1.0, 2.0])], &[v(&[0.5, -1.0])], &labels, 1e-8).unwrap();
        // p = q = 1 in both directions: loss = -2 ln(1 + eps).
        assert!(loss.abs() < 1e-7, "loss {loss}");
    }

    #[test]
    fn cmpm_prefers_matched_orthonormal_pairs() {
        let imgs = [v(&[5.0, 0.0]), v(&[0.0, 5.0])];
        let txts = [v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let labels = labels_diag(2);
        let matched = cmpm_loss(&imgs, &txts, &labels, 1e-8).unwrap();
        let swapped = cmpm_loss(&imgs, &[txts[1].clone(), txts[0].clone()], &labels, 1e-8).unwrap();
        assert!(matched < swapped, "matched {matched} vs swapped {swapped}");
    }

    #[test]
    fn cmpm_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let n = 4;
            let d = 5;
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let zs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect();
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let labels = MatchLabels::from_identities(&ids, &ids);
            let y: Vec<Vec<bool>> = (0..n)
                .map(|a| (0..n).map(|b| labels.positive(a, b)).collect())
                .collect();
            let expected = cmpm_oracle(&xs, &zs, &y, 1e-8);
            let xs64: Vec<Vec64> = xs.iter().map(|x| v(x)).collect();
            let zs64: Vec<Vec64> = zs.iter().map(|z| v(z)).collect();
            let got = cmpm_loss(&xs64, &zs64, &labels, 1e-8).unwrap();
            assert_relative_eq!(got, expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn cmpm_rejects_zero_norm_embedding() {
        let labels = labels_diag(1);
        let err = cmpm_loss(&[v(&[1.0, 0.0])], &[v(&[0.0, 0.0])], &labels, 1e-8).unwrap_err();
        assert!(matches!(err, LossError::DegenerateEmbedding { .. }));
    }

    #[test]
    fn cmpc_single_class_is_zero() {
        let w = Mat64::from_vec(2, 1, vec![0.3, 0.7]).unwrap();
        let loss = cmpc_loss(&[v(&[1.0, 2.0])], &[v(&[2.0, 1.0])], &[0], &w).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn cmpc_saturated_softmax_is_tiny() {
        // Matched large-norm features along u; correct column u, wrong
        // column -u: logit gap 2 * 8 in both directions.
        let u = [1.0, 0.0];
        let imgs = [v(&[8.0 * u[0], 8.0 * u[1]])];
        let txts = [v(&[8.0 * u[0], 8.0 * u[1]])];
        let w = Mat64::from_vec(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let loss = cmpc_loss(&imgs, &txts, &[0], &w).unwrap();
        assert!(loss < 1e-3, "loss {loss}");
    }

    #[test]
    fn cmpc_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let n = 5;
        let d = 4;
        let n_classes = 3;
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let zs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ids: Vec<u32> = (0..n as u32).map(|i| i % n_classes as u32).collect();
        let w_data: Vec<f64> = (0..d * n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w = Mat64::from_vec(d, n_classes, w_data.clone()).unwrap();

        // Direct formula, independent code path.
        let norm = |vv: &[f64]| {
            let s: f64 = vv.iter().map(|x| x * x).sum::<f64>().sqrt();
            vv.iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let cols: Vec<Vec<f64>> = (0..n_classes)
            .map(|c| norm(&(0..d).map(|i| w_data[i * n_classes + c]).collect::<Vec<_>>()))
            .collect();
        let direction = |feats: &[Vec<f64>], partners: &[Vec<f64>]| -> f64 {
            let mut total = 0.0;
            for a in 0..n {
                let hat = norm(&partners[a]);
                let coeff: f64 = feats[a].iter().zip(&hat).map(|(x, y)| x * y).sum();
                let proj: Vec<f64> = hat.iter().map(|h| h * coeff).collect();
                let logits: Vec<f64> = cols
                    .iter()
                    .map(|c| proj.iter().zip(c).map(|(x, y)| x * y).sum())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                total += -(logits[ids[a] as usize] - m - z.ln());
            }
            total / n as f64
        };
        let expected = direction(&xs, &zs) + direction(&zs, &xs);

        let xs64: Vec<Vec64> = xs.iter().map(|x| v(x)).collect();
        let zs64: Vec<Vec64> = zs.iter().map(|z| v(z)).collect();
        let got = cmpc_loss(&xs64, &zs64, &ids, &w).unwrap();
        assert_relative_eq!(got, expected, epsilon = 1e-10);
    }

    #[test]
    fn cmpc_rejects_unknown_identity() {
        let w = Mat64::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = cmpc_loss(&[v(&[1.0, 0.0])], &[v(&[1.0, 0.0])], &[5], &w).unwrap_err();
        assert!(matches!(err, LossError::UnknownIdentity { identity: 5, n_classes: 2 }));
    }

    #[test]
    fn cross_scale_identity_scores_near_zero() {
        let labels = labels_diag(2);
        let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let loss = cross_scale_loss(&s, &s, &labels, 1e-8).unwrap();
        assert!(loss.i2t.abs() < 1e-7, "i2t {}", loss.i2t);
        assert!(loss.t2i.abs() < 1e-7, "t2i {}", loss.t2i);
    }

    #[test]
    fn cross_scale_all_ones_matches_frozen_oracle() {
        let labels = labels_diag(2);
        let s = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let loss = cross_scale_loss(&s, &s, &labels, 1e-8).unwrap();
        // Per row: p = (0.5, 0.5) against q = (1, 0) with eps 1e-8.
        assert_relative_eq!(loss.i2t, 8.517193138830272, epsilon = 1e-6);
        assert_relative_eq!(loss.t2i, 8.517193138830272, epsilon = 1e-6);
    }

    #[test]
    fn cross_scale_invariant_under_joint_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 5;
        let ids: Vec<u32> = vec![0, 1, 2, 0, 1];
        let s_i2t: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.5..1.0)).collect())
            .collect();
        let s_t2i: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-0.5..1.0)).collect())
            .collect();
        let labels = MatchLabels::from_identities(&ids, &ids);
        let base = cross_scale_loss(&s_i2t, &s_t2i, &labels, 1e-8).unwrap();

        let perm = [3usize, 0, 4, 1, 2];
        let permute = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            perm.iter()
                .map(|&a| perm.iter().map(|&b| m[a][b]).collect())
                .collect()
        };
        let perm_ids: Vec<u32> = perm.iter().map(|&i| ids[i]).collect();
        let perm_labels = MatchLabels::from_identities(&perm_ids, &perm_ids);
        let permuted =
            cross_scale_loss(&permute(&s_i2t), &permute(&s_t2i), &perm_labels, 1e-8).unwrap();
        assert_relative_eq!(base.total, permuted.total, epsilon = 1e-12);
    }

    #[test]
    fn cross_scale_flags_all_negative_line() {
        let labels = labels_diag(2);
        let s_bad = vec![vec![-0.3, -0.9], vec![0.4, -0.1]];
        let s_ok = vec![vec![0.5, 0.1], vec![0.2, 0.6]];
        let loss = cross_scale_loss(&s_bad, &s_ok, &labels, 1e-8).unwrap();
        assert_eq!(loss.degenerate_lines, 1);
        assert!(loss.total.is_finite());
    }

    fn toy_batch_corpus(seed: u64) -> crate::corpus::Corpus {
        crate::corpus::synthetic::generate(&crate::corpus::synthetic::SyntheticConfig {
            n_identities: 4,
            imgs_per_id: 1,
            txts_per_id: 1,
            dim: 6,
            sigma: 0.2,
            m_max: 3,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn total_reduces_to_cmpm_when_weights_vanish() {
        let corpus = toy_batch_corpus(2);
        let batch = Batch::from_matched_pairs(
            corpus.images.iter().collect(),
            corpus.texts.iter().collect(),
        )
        .unwrap();
        let params = Params::init(6, 4, 2);
        let weights = LossWeights {
            mu: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let report = total_loss(&batch, &AttentionConfig::default(), &weights, &params).unwrap();
        assert_eq!(report.total, report.cmpm);
    }

    #[test]
    fn total_decomposition_identity() {
        let corpus = toy_batch_corpus(8);
        let batch = Batch::from_matched_pairs(
            corpus.images.iter().collect(),
            corpus.texts.iter().collect(),
        )
        .unwrap();
        let params = Params::init(6, 4, 8);
        for (mu, gamma) in [(4.0, 0.1), (0.5, 2.0), (0.0, 1.0)] {
            let weights = LossWeights {
                mu,
                gamma,
                ..Default::default()
            };
            let r = total_loss(&batch, &AttentionConfig::default(), &weights, &params).unwrap();
            let recomposed = r.cmpm + mu * r.cmpc + gamma * (r.cross_i2t + r.cross_t2i);
            assert!((r.total - recomposed).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_rejects_mismatched_pairs() {
        let corpus = toy_batch_corpus(5);
        let err = Batch::from_matched_pairs(
            vec![&corpus.images[0], &corpus.images[1]],
            vec![&corpus.texts[1], &corpus.texts[0]],
        )
        .unwrap_err();
        assert!(matches!(err, LossError::PairMismatch { index: 0, .. }));
    }

    #[test]
    fn grad_matches_total_loss_value() {
        let corpus = toy_batch_corpus(13);
        let batch = Batch::from_matched_pairs(
            corpus.images.iter().collect(),
            corpus.texts.iter().collect(),
        )
        .unwrap();
        let params = Params::init(6, 4, 13);
        let weights = LossWeights::default();
        let cfg = AttentionConfig::default();
        let plain = total_loss(&batch, &cfg, &weights, &params).unwrap();
        let (taped, grad) = total_loss_with_grad(&batch, &cfg, &weights, &params).unwrap();
        assert_relative_eq!(plain.total, taped.total, epsilon = 1e-14);
        assert_eq!(grad.len(), params.layout().total_len());
        assert!(grad.iter().any(|g| g.abs() > 0.0), "gradient all zero");
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let params = Params::init(5, 3, 99);
        let flat = params.to_flat();
        let mut other = Params::init(5, 3, 1);
        other.set_from_flat(&flat);
        assert_eq!(other.to_flat(), flat);
    }
}
