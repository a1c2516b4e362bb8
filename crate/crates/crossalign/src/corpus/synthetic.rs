//! Seeded synthetic corpora with planted identity structure.
//!
//! Each identity gets a global prototype and four region sub-prototypes.
//! Image vectors are noisy copies of those prototypes; text vectors are
//! noisy images of the prototypes under fixed orthogonal maps, one for the
//! global/sentence scale and a separate one for the phrase scale. Roughly
//! 30% of phrases describe the whole identity (global scope) and the rest
//! describe a single region, which is the cross-scale structure the
//! attention scorer is meant to exploit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Corpus, CorpusError, CorpusManifest, ImageEntity, TextEntity};
use crate::numerics::{Mat64, Vec64};
use crate::partition::REGION_COUNT;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub n_identities: usize,
    pub imgs_per_id: usize,
    pub txts_per_id: usize,
    pub dim: usize,
    pub sigma: f64,
    pub m_max: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_identities: 20,
            imgs_per_id: 4,
            txts_per_id: 4,
            dim: 768,
            sigma: 0.05,
            m_max: 10,
            seed: 0,
        }
    }
}

/// The fixed text-domain maps a corpus was generated with. Orthogonal, so
/// `transpose()` inverts them exactly.
#[derive(Debug, Clone)]
pub struct GroundTruthMaps {
    pub global: Mat64,
    pub phrase: Mat64,
}

/// Maps are a function of (dim, seed) only, recoverable without the corpus.
pub fn ground_truth_maps(dim: usize, seed: u64) -> GroundTruthMaps {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let global = random_rotation(dim, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let phrase = random_rotation(dim, &mut rng);
    GroundTruthMaps { global, phrase }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Corpus, CorpusError> {
    if cfg.n_identities < 1 || cfg.imgs_per_id < 1 || cfg.txts_per_id < 1 {
        return Err(CorpusError::BadConfig(
            "identity, image, and text counts must all be at least 1".into(),
        ));
    }
    if cfg.dim < 4 {
        return Err(CorpusError::BadConfig(format!(
            "dim must be at least 4, got {}",
            cfg.dim
        )));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(CorpusError::BadConfig(format!(
            "sigma must be non-negative, got {}",
            cfg.sigma
        )));
    }
    if cfg.m_max < 1 {
        return Err(CorpusError::BadConfig("m_max must be at least 1".into()));
    }

    let maps = ground_truth_maps(cfg.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut images = Vec::with_capacity(cfg.n_identities * cfg.imgs_per_id);
    let mut texts = Vec::with_capacity(cfg.n_identities * cfg.txts_per_id);
    // Texts with very few phrases carry little local structure; keep the
    // draw within the upper half of the allowed range.
    let min_phrases = (cfg.m_max / 2).max(1);

    for identity in 0..cfg.n_identities {
        let prototype = gauss_vec(cfg.dim, &mut rng);
        let sub: Vec<Vec<f64>> = (0..REGION_COUNT)
            .map(|_| gauss_vec(cfg.dim, &mut rng))
            .collect();
        // Slice bands, top to bottom: head occupies the first two slices,
        // upper body the third, lower body the next two, feet the last.
        let slice_sources = [&sub[0], &sub[0], &sub[1], &sub[2], &sub[2], &sub[3]];

        for j in 0..cfg.imgs_per_id {
            let global = noisy(&prototype, cfg.sigma, &mut rng);
            let slices: Vec<Vec64> = slice_sources
                .iter()
                .map(|src| Vec64::new(noisy_raw(src, cfg.sigma, &mut rng)).expect("finite"))
                .collect();
            images.push(ImageEntity::new(
                format!("img-{identity:04}-{j}"),
                identity as u32,
                global,
                slices,
            )?);
        }

        let mapped_global = maps.global.matvec(&prototype);
        let mapped_sub: Vec<Vec<f64>> = sub.iter().map(|r| maps.phrase.matvec(r)).collect();
        for j in 0..cfg.txts_per_id {
            let global = noisy(&mapped_global, cfg.sigma, &mut rng);
            let n_phrases = rng.gen_range(min_phrases..=cfg.m_max);
            let phrases: Vec<Vec64> = (0..n_phrases)
                .map(|_| {
                    let source = if rng.gen_bool(0.3) {
                        &mapped_global
                    } else {
                        &mapped_sub[rng.gen_range(0..REGION_COUNT)]
                    };
                    Vec64::new(noisy_raw(source, cfg.sigma, &mut rng)).expect("finite")
                })
                .collect();
            texts.push(TextEntity::new(
                format!("txt-{identity:04}-{j}"),
                identity as u32,
                global,
                phrases,
                cfg.m_max,
            )?);
        }
    }

    Ok(Corpus {
        manifest: CorpusManifest::new(cfg.dim, cfg.m_max),
        images,
        texts,
    })
}

fn gauss_vec(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn noisy_raw(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    base.iter()
        .map(|&x| x + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn noisy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec64 {
    Vec64::new(noisy_raw(base, sigma, rng)).expect("finite")
}

/// Random orthogonal matrix via modified Gram-Schmidt on Gaussian columns.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Mat64 {
    let mut cols: Vec<Vec<f64>> = (0..dim).map(|_| gauss_vec(dim, rng)).collect();
    for c in 0..dim {
        for prev in 0..c {
            let proj: f64 = (0..dim).map(|r| cols[c][r] * cols[prev][r]).sum();
            for r in 0..dim {
                cols[c][r] -= proj * cols[prev][r];
            }
        }
        let norm: f64 = (0..dim)
            .map(|r| cols[c][r] * cols[c][r])
            .sum::<f64>()
            .sqrt();
        assert!(norm > 1e-10, "degenerate random rotation column");
        for r in 0..dim {
            cols[c][r] /= norm;
        }
    }
    let mut m = Mat64::zeros(dim, dim);
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m.set(r, c, x);
        }
    }
    m
}
