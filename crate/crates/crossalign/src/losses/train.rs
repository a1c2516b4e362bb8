//! Plain gradient-descent training at desk scale.
//!
//! Holds out a fixed number of images and texts per identity, then
//! iterates identity-grouped batches of matched pairs: each batch samples
//! distinct identities with one training image and one training text
//! each, so the label matrix always has a positive per row and column.
//! After every epoch the held-out split is scored with the fused attention
//! similarity and evaluated at top-k.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_params, total_loss_with_grad, Batch, LossError, LossReport, LossWeights, Params};
use crate::alignment::AttentionConfig;
use crate::corpus::{Corpus, MatchLabels};
use crate::retrieval::{score_corpus, topk_eval, TopKReport};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Images and texts held out per identity for evaluation.
    pub heldout_per_id: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub attention: AttentionConfig,
    /// Fusion weight for the held-out evaluation score.
    pub beta: f64,
    pub ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.3,
            batch_size: 8,
            heldout_per_id: 1,
            seed: 0,
            weights: LossWeights::default(),
            attention: AttentionConfig::default(),
            beta: 0.5,
            ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    /// Loss terms averaged over the epoch's batches.
    pub mean_loss: LossReport,
    pub heldout: TopKReport,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub trace: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn final_heldout(&self) -> &TopKReport {
        &self.trace.last().expect("at least one epoch").heldout
    }
}

pub fn train_toy(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome, LossError> {
    cfg.weights.validate()?;
    cfg.attention.validate()?;
    if cfg.epochs == 0 {
        return Err(LossError::BadConfig("at least one epoch required".into()));
    }
    if cfg.heldout_per_id == 0 {
        return Err(LossError::BadConfig(
            "heldout_per_id must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.beta) {
        return Err(LossError::BadConfig(format!(
            "beta must lie in [0, 1], got {}",
            cfg.beta
        )));
    }

    let mut imgs_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, img) in corpus.images.iter().enumerate() {
        imgs_by_id.entry(img.identity).or_default().push(i);
    }
    let mut txts_by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, txt) in corpus.texts.iter().enumerate() {
        txts_by_id.entry(txt.identity).or_default().push(i);
    }
    if imgs_by_id.len() < 2 {
        return Err(LossError::BadConfig(format!(
            "training needs at least 2 identities, got {}",
            imgs_by_id.len()
        )));
    }

    // Deterministic split: the last heldout_per_id entries per identity
    // (corpus order) are the evaluation set.
    let mut train_imgs: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut train_txts: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut held_imgs: Vec<usize> = Vec::new();
    let mut held_txts: Vec<usize> = Vec::new();
    for (&id, list) in &imgs_by_id {
        if list.len() <= cfg.heldout_per_id {
            return Err(LossError::BadConfig(format!(
                "identity {id} has {} images; need more than heldout_per_id={}",
                list.len(),
                cfg.heldout_per_id
            )));
        }
        let split = list.len() - cfg.heldout_per_id;
        train_imgs.insert(id, list[..split].to_vec());
        held_imgs.extend_from_slice(&list[split..]);
    }
    for (&id, list) in &txts_by_id {
        if list.len() <= cfg.heldout_per_id {
            return Err(LossError::BadConfig(format!(
                "identity {id} has {} texts; need more than heldout_per_id={}",
                list.len(),
                cfg.heldout_per_id
            )));
        }
        let split = list.len() - cfg.heldout_per_id;
        train_txts.insert(id, list[..split].to_vec());
        held_txts.extend_from_slice(&list[split..]);
    }
    if !imgs_by_id.keys().eq(txts_by_id.keys()) {
        return Err(LossError::BadConfig(
            "image and text identity sets differ".into(),
        ));
    }

    let dim = corpus.manifest.dim;
    let n_classes = corpus
        .images
        .iter()
        .map(|i| i.identity)
        .max()
        .expect("non-empty corpus") as usize
        + 1;
    let mut params = Params::init(dim, n_classes, cfg.seed);
    let mut flat = params.to_flat();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(4);

    let all_train_txts: Vec<usize> = train_txts.values().flatten().copied().collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        // One epoch is one shuffled pass over the training captions; each
        // caption is paired with a random training image of its identity.
        let mut order = all_train_txts.clone();
        order.shuffle(&mut rng);

        let mut batch_reports: Vec<LossReport> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut images = Vec::with_capacity(chunk.len());
            let mut texts = Vec::with_capacity(chunk.len());
            for &txt_idx in chunk {
                let txt = &corpus.texts[txt_idx];
                let imgs = &train_imgs[&txt.identity];
                images.push(&corpus.images[imgs[rng.gen_range(0..imgs.len())]]);
                texts.push(txt);
            }
            let batch = Batch::from_matched_pairs(images, texts)?;
            let (report, grad) = total_loss_with_grad(&batch, &cfg.attention, &cfg.weights, &params)?;
            if !report.total.is_finite() {
                return Err(LossError::NonFinite(format!(
                    "epoch {epoch}: total {} (cmpm {}, cmpc {}, cross {})",
                    report.total, report.cmpm, report.cmpc, report.cross_scale
                )));
            }
            for (p, g) in flat.iter_mut().zip(&grad) {
                *p -= cfg.lr * g;
            }
            params.set_from_flat(&flat);
            batch_reports.push(report);
        }

        let heldout = evaluate_heldout(corpus, &held_imgs, &held_txts, &params, cfg)?;
        trace.push(EpochStats {
            epoch,
            mean_loss: mean_report(&batch_reports),
            heldout,
        });
    }

    Ok(TrainOutcome { params, trace })
}

fn evaluate_heldout(
    corpus: &Corpus,
    held_imgs: &[usize],
    held_txts: &[usize],
    params: &Params,
    cfg: &TrainConfig,
) -> Result<TopKReport, LossError> {
    let images: Vec<_> = held_imgs.iter().map(|&i| corpus.images[i].clone()).collect();
    let texts: Vec<_> = held_txts.iter().map(|&i| corpus.texts[i].clone()).collect();
    let (images, texts) = apply_params(&images, &texts, params)?;
    let scores = score_corpus(&texts, &images, &cfg.attention, cfg.beta)
        .map_err(|e| LossError::BadConfig(e.to_string()))?;
    let labels = MatchLabels::from_identities(
        &images.iter().map(|i| i.identity).collect::<Vec<_>>(),
        &texts.iter().map(|t| t.identity).collect::<Vec<_>>(),
    );
    topk_eval(&scores, &labels, &cfg.ks).map_err(|e| LossError::BadConfig(e.to_string()))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        cmpm: sum(|r| r.cmpm),
        cmpc: sum(|r| r.cmpc),
        cross_i2t: sum(|r| r.cross_i2t),
        cross_t2i: sum(|r| r.cross_t2i),
        cross_scale: sum(|r| r.cross_scale),
        total: sum(|r| r.total),
        degenerate_lines: reports.iter().map(|r| r.degenerate_lines).sum(),
    }
}
