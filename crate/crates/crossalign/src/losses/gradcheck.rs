//! Central-difference verification of the total-loss gradients.
//!
//! Builds seeded toy batches, perturbs every trainable parameter in turn,
//! and compares the tape gradient against `(f(θ+h) - f(θ-h)) / 2h`. The
//! relative error uses `max(1, |fd|)` in the denominator so near-zero
//! derivatives do not blow the ratio up.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{total_loss, total_loss_with_grad, Batch, LossError, LossWeights, Params};
use crate::alignment::AttentionConfig;
use crate::corpus::synthetic::{generate, SyntheticConfig};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Number of seeded toy batches.
    pub seeds: usize,
    /// Pairs per batch.
    pub batch: usize,
    pub dim: usize,
    pub m_max: usize,
    /// Central-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    pub weights: LossWeights,
    pub attention: AttentionConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            batch: 4,
            dim: 6,
            m_max: 3,
            h: 1e-5,
            tolerance: 1e-4,
            weights: LossWeights::default(),
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checks: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// (seed, flat parameter index) of the worst deviation.
    pub worst: Option<(u64, usize)>,
}

pub fn check_total_loss_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport, LossError> {
    if cfg.seeds == 0 || cfg.batch == 0 {
        return Err(LossError::BadConfig(
            "gradcheck needs at least one seed and one pair".into(),
        ));
    }
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checks = 0usize;

    for seed in 0..cfg.seeds as u64 {
        let corpus = generate(&SyntheticConfig {
            n_identities: cfg.batch,
            imgs_per_id: 1,
            txts_per_id: 1,
            dim: cfg.dim,
            sigma: 0.3,
            m_max: cfg.m_max,
            seed,
        })?;
        let batch = Batch::from_matched_pairs(
            corpus.images.iter().collect(),
            corpus.texts.iter().collect(),
        )?;

        // Move parameters off their identity initialization so the check
        // exercises generic points, not special-cased ones.
        let mut params = Params::init(cfg.dim, cfg.batch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        let mut flat = params.to_flat();
        for x in &mut flat {
            *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        params.set_from_flat(&flat);

        let (_, analytic) = total_loss_with_grad(&batch, &cfg.attention, &cfg.weights, &params)?;

        let mut probe = params.clone();
        for i in 0..flat.len() {
            let saved = flat[i];
            flat[i] = saved + cfg.h;
            probe.set_from_flat(&flat);
            let plus = total_loss(&batch, &cfg.attention, &cfg.weights, &probe)?.total;
            flat[i] = saved - cfg.h;
            probe.set_from_flat(&flat);
            let minus = total_loss(&batch, &cfg.attention, &cfg.weights, &probe)?.total;
            flat[i] = saved;

            let fd = (plus - minus) / (2.0 * cfg.h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            checks += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((seed, i));
            }
        }
        probe.set_from_flat(&flat);
    }

    Ok(GradCheckReport {
        max_rel_err,
        checks,
        tolerance: cfg.tolerance,
        passed: max_rel_err <= cfg.tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_at_tolerance() {
        let report = check_total_loss_gradients(&GradCheckConfig::default()).unwrap();
        assert!(
            report.passed,
            "max rel err {} at {:?} over {} checks",
            report.max_rel_err, report.worst, report.checks
        );
    }

    #[test]
    fn rejects_empty_config() {
        let cfg = GradCheckConfig {
            seeds: 0,
            ..Default::default()
        };
        assert!(check_total_loss_gradients(&cfg).is_err());
    }
}
