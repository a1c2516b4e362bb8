//! Corpus-level scoring, top-k evaluation, and similarity-fusion
//! re-ranking.
//!
//! Queries are always texts and the gallery is always images. Entry (q, g)
//! of a fused matrix is `beta * i2t + (1 - beta) * t2i`, so `beta` 1 and 0
//! recover the two single directions. Ranking ties break on ascending
//! gallery id to keep reports reproducible across platforms.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::alignment::{score_pair, AlignmentError, AttentionConfig};
use crate::corpus::{ImageEntity, MatchLabels, TextEntity};
use crate::numerics::cosine;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("fusion weight must lie in [0, 1], got {0}")]
    BadFusionWeight(f64),
    #[error("queries and gallery must be non-empty")]
    EmptyInput,
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error("labels are {labels_img}x{labels_txt} but scores are {gallery}x{queries} (gallery x queries)")]
    LabelShape {
        labels_img: usize,
        labels_txt: usize,
        gallery: usize,
        queries: usize,
    },
    #[error("gallery-gallery matrix does not cover the same gallery as the query matrix")]
    GalleryMismatch,
    #[error("neighborhood size must be at least 1")]
    ZeroNeighborhood,
    #[error("score table line {line}: {message}")]
    ParseTable { line: usize, message: String },
    #[error("score table is not a complete query x gallery grid")]
    IncompleteTable,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    I2T,
    T2I,
    Fused,
    ImageImage,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Direction::I2T => "i2t",
            Direction::T2I => "t2i",
            Direction::Fused => "fused",
            Direction::ImageImage => "image-image",
        };
        f.write_str(s)
    }
}

/// Query × gallery score matrix with its id lists and direction tag.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub direction: Direction,
    pub query_ids: Vec<String>,
    pub gallery_ids: Vec<String>,
    scores: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(
        direction: Direction,
        query_ids: Vec<String>,
        gallery_ids: Vec<String>,
        scores: Vec<f64>,
    ) -> Self {
        assert_eq!(scores.len(), query_ids.len() * gallery_ids.len());
        debug_assert!(scores.iter().all(|s| s.is_finite()));
        Self {
            direction,
            query_ids,
            gallery_ids,
            scores,
        }
    }

    pub fn n_queries(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_gallery(&self) -> usize {
        self.gallery_ids.len()
    }

    pub fn get(&self, query: usize, gallery: usize) -> f64 {
        self.scores[query * self.gallery_ids.len() + gallery]
    }

    pub fn row(&self, query: usize) -> &[f64] {
        let n = self.gallery_ids.len();
        &self.scores[query * n..(query + 1) * n]
    }

    /// Gallery indices in rank order for one query: descending score,
    /// ties broken by ascending gallery id.
    pub fn ranked_gallery(&self, query: usize) -> Vec<usize> {
        let row = self.row(query);
        let mut order: Vec<usize> = (0..self.n_gallery()).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .expect("scores are finite")
                .then_with(|| self.gallery_ids[a].cmp(&self.gallery_ids[b]))
        });
        order
    }

    /// Line-delimited `query_id \t gallery_id \t score` table; floats print
    /// in shortest round-trip form so tables diff cleanly.
    pub fn write_tsv(&self, out: &mut impl Write) -> Result<(), RetrievalError> {
        for (q, qid) in self.query_ids.iter().enumerate() {
            for (g, gid) in self.gallery_ids.iter().enumerate() {
                writeln!(out, "{qid}\t{gid}\t{}", self.get(q, g))?;
            }
        }
        Ok(())
    }

    /// Reads a table produced by [`write_tsv`](Self::write_tsv). Requires a
    /// complete grid; row/column order follows first appearance.
    pub fn read_tsv(input: &mut impl BufRead, direction: Direction) -> Result<Self, RetrievalError> {
        let mut query_ids: Vec<String> = Vec::new();
        let mut gallery_ids: Vec<String> = Vec::new();
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let line_no = idx + 1;
            let mut parts = line.split('\t');
            let (qid, gid, score) = match (parts.next(), parts.next(), parts.next(), parts.next())
            {
                (Some(q), Some(g), Some(s), None) => (q, g, s),
                _ => {
                    return Err(RetrievalError::ParseTable {
                        line: line_no,
                        message: "expected query_id\\tgallery_id\\tscore".into(),
                    })
                }
            };
            let score: f64 = score.parse().map_err(|e| RetrievalError::ParseTable {
                line: line_no,
                message: format!("bad score: {e}"),
            })?;
            if !score.is_finite() {
                return Err(RetrievalError::ParseTable {
                    line: line_no,
                    message: "score is not finite".into(),
                });
            }
            let q = index_of(&mut query_ids, qid);
            let g = index_of(&mut gallery_ids, gid);
            entries.push((q, g, score));
        }
        if query_ids.is_empty() {
            return Err(RetrievalError::EmptyInput);
        }
        let n_g = gallery_ids.len();
        let mut scores = vec![f64::NAN; query_ids.len() * n_g];
        for (q, g, s) in entries {
            scores[q * n_g + g] = s;
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(RetrievalError::IncompleteTable);
        }
        Ok(Self::new(direction, query_ids, gallery_ids, scores))
    }
}

fn index_of(ids: &mut Vec<String>, id: &str) -> usize {
    match ids.iter().position(|x| x == id) {
        Some(i) => i,
        None => {
            ids.push(id.to_string());
            ids.len() - 1
        }
    }
}

/// Score every text query against every gallery image with the fused
/// attention similarity. Rows fill in parallel.
pub fn score_corpus(
    texts: &[TextEntity],
    images: &[ImageEntity],
    cfg: &AttentionConfig,
    beta: f64,
) -> Result<SimilarityMatrix, RetrievalError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(RetrievalError::BadFusionWeight(beta));
    }
    if texts.is_empty() || images.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    cfg.validate()?;
    let rows: Result<Vec<Vec<f64>>, AlignmentError> = texts
        .par_iter()
        .map(|txt| {
            images
                .iter()
                .map(|img| {
                    let pair = score_pair(img, txt, cfg)?;
                    Ok(beta * pair.i2t + (1.0 - beta) * pair.t2i)
                })
                .collect()
        })
        .collect();
    let scores: Vec<f64> = rows?.into_iter().flatten().collect();
    let direction = if beta == 1.0 {
        Direction::I2T
    } else if beta == 0.0 {
        Direction::T2I
    } else {
        Direction::Fused
    };
    Ok(SimilarityMatrix::new(
        direction,
        texts.iter().map(|t| t.id.clone()).collect(),
        images.iter().map(|i| i.id.clone()).collect(),
        scores,
    ))
}

/// Gallery-gallery cosine matrix over image global embeddings, the carrier
/// used for re-ranking.
pub fn gallery_similarity(images: &[ImageEntity]) -> Result<SimilarityMatrix, RetrievalError> {
    if images.is_empty() {
        return Err(RetrievalError::EmptyInput);
    }
    let n = images.len();
    let mut scores = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            scores[a * n + b] = cosine(&images[a].global, &images[b].global)
                .expect("corpus vectors share one dimension")
                .value;
        }
    }
    let ids: Vec<String> = images.iter().map(|i| i.id.clone()).collect();
    Ok(SimilarityMatrix::new(
        Direction::ImageImage,
        ids.clone(),
        ids,
        scores,
    ))
}

/// Top-k accuracies plus the rank of the first correct match per query
/// (1-based; None when the query has no positive in the gallery).
#[derive(Debug, Clone)]
pub struct TopKReport {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub first_match_rank: Vec<Option<usize>>,
    /// Queries without any positive: excluded from the accuracy
    /// denominator but counted here.
    pub excluded: usize,
    pub evaluated: usize,
}

impl TopKReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.accuracy[i])
    }
}

/// Rank the gallery per query and report top-k hit rates.
///
/// `labels` is image × text as built by the corpus module; queries are
/// texts, so query q matches gallery g iff `labels.positive(g, q)`.
pub fn topk_eval(
    scores: &SimilarityMatrix,
    labels: &MatchLabels,
    ks: &[usize],
) -> Result<TopKReport, RetrievalError> {
    if labels.n_img() != scores.n_gallery() || labels.n_txt() != scores.n_queries() {
        return Err(RetrievalError::LabelShape {
            labels_img: labels.n_img(),
            labels_txt: labels.n_txt(),
            gallery: scores.n_gallery(),
            queries: scores.n_queries(),
        });
    }
    let mut first_match_rank = Vec::with_capacity(scores.n_queries());
    let mut excluded = 0usize;
    for q in 0..scores.n_queries() {
        if !labels.col_has_positive(q) {
            excluded += 1;
            first_match_rank.push(None);
            continue;
        }
        let order = scores.ranked_gallery(q);
        let rank = order
            .iter()
            .position(|&g| labels.positive(g, q))
            .map(|p| p + 1);
        first_match_rank.push(rank);
    }
    let evaluated = scores.n_queries() - excluded;
    let accuracy = ks
        .iter()
        .map(|&k| {
            if evaluated == 0 {
                return 0.0;
            }
            let hits = first_match_rank
                .iter()
                .filter(|r| matches!(r, Some(rank) if *rank <= k))
                .count();
            hits as f64 / evaluated as f64
        })
        .collect();
    Ok(TopKReport {
        ks: ks.to_vec(),
        accuracy,
        first_match_rank,
        excluded,
        evaluated,
    })
}

/// Refine query-gallery scores with gallery-gallery structure:
/// `refined(q, g) = (1-w) * s(q, g) + w * mean over the query's top-j
/// gallery items g' of gallery_sim(g, g')`.
pub fn rerank(
    s_qg: &SimilarityMatrix,
    s_gg: &SimilarityMatrix,
    j: usize,
    w: f64,
) -> Result<SimilarityMatrix, RetrievalError> {
    if !(0.0..=1.0).contains(&w) {
        return Err(RetrievalError::BadFusionWeight(w));
    }
    if j == 0 {
        return Err(RetrievalError::ZeroNeighborhood);
    }
    if s_gg.query_ids != s_qg.gallery_ids || s_gg.gallery_ids != s_qg.gallery_ids {
        return Err(RetrievalError::GalleryMismatch);
    }
    let n_g = s_qg.n_gallery();
    let j = if j > n_g {
        log::warn!("neighborhood {j} exceeds gallery size {n_g}; clamping");
        n_g
    } else {
        j
    };

    let mut scores = Vec::with_capacity(s_qg.n_queries() * n_g);
    for q in 0..s_qg.n_queries() {
        let neighbors: Vec<usize> = s_qg.ranked_gallery(q).into_iter().take(j).collect();
        for g in 0..n_g {
            let context: f64 =
                neighbors.iter().map(|&g2| s_gg.get(g, g2)).sum::<f64>() / j as f64;
            scores.push((1.0 - w) * s_qg.get(q, g) + w * context);
        }
    }
    Ok(SimilarityMatrix::new(
        s_qg.direction,
        s_qg.query_ids.clone(),
        s_qg.gallery_ids.clone(),
        scores,
    ))
}
