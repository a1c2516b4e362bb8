// scratch probe — not part of the crate
use crossalign::corpus::synthetic::{generate, ground_truth_maps, SyntheticConfig};
use crossalign::corpus::MatchLabels;
use crossalign::losses::{apply_params, Params};
use crossalign::numerics::{cosine, Mat64};
use crossalign::partition::RegionProjection;
use crossalign::retrieval::{gallery_similarity, rerank, topk_eval, Direction, SimilarityMatrix};

fn main() {
    for sigma in [1.0, 1.2, 1.4] {
        let mut base_mean = 0.0;
        let mut rr_mean = 0.0;
        let mut detail = String::new();
        for seed in 0..5u64 {
            let cfg = SyntheticConfig {
                n_identities: 12,
                imgs_per_id: 6,
                txts_per_id: 3,
                dim: 24,
                sigma,
                m_max: 10,
                seed,
            };
            let corpus = generate(&cfg).unwrap();
            let maps = ground_truth_maps(cfg.dim, seed);
            let params = Params {
                region_proj: RegionProjection::identity(cfg.dim),
                text_adapter: maps.global.transpose(),
                class_weights: Mat64::identity(cfg.dim),
            };
            let (imgs, txts) = apply_params(&corpus.images, &corpus.texts, &params).unwrap();
            let labels = MatchLabels::from_identities(
                &imgs.iter().map(|i| i.identity).collect::<Vec<_>>(),
                &txts.iter().map(|t| t.identity).collect::<Vec<_>>(),
            );
            let mut scores = Vec::new();
            for t in &txts {
                for i in &imgs {
                    scores.push(cosine(&t.global, &i.global).unwrap().value);
                }
            }
            let qg = SimilarityMatrix::new(
                Direction::Fused,
                txts.iter().map(|t| t.id.clone()).collect(),
                imgs.iter().map(|i| i.id.clone()).collect(),
                scores,
            );
            let gg = gallery_similarity(&imgs).unwrap();
            let refined = rerank(&qg, &gg, 5, 0.3).unwrap();
            let base = topk_eval(&qg, &labels, &[1]).unwrap().accuracy[0];
            let rr = topk_eval(&refined, &labels, &[1]).unwrap().accuracy[0];
            base_mean += base / 5.0;
            rr_mean += rr / 5.0;
            detail.push_str(&format!(" s{seed}:{base:.2}->{rr:.2}"));
        }
        println!("sigma={sigma}: base={base_mean:.4} reranked={rr_mean:.4}{detail}");
    }
}
