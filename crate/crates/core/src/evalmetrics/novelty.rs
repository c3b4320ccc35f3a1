//! Facts far from every reference yet highly relevant to their context.

use serde::{Deserialize, Serialize};

use crate::corpus::FactTriple;
use crate::error::Result;
use crate::evalmetrics::cluster::cluster_facts;
use crate::evalmetrics::relevance::RelevanceScorer;
use crate::evalmetrics::similarity::{cosine, EmbeddingProvider, Features};

pub const NOVELTY_MAX_COSINE: f64 = 0.45;
pub const NOVELTY_MIN_RELEVANCE: f64 = 0.97;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoveltyRecord {
    pub n_novel_facts: usize,
    pub n_novel_clusters: usize,
}

/// Novelty decision from precomputed quantities.
pub fn is_novel(max_cosine_to_pool: f64, relevance: f64) -> bool {
    max_cosine_to_pool < NOVELTY_MAX_COSINE && relevance > NOVELTY_MIN_RELEVANCE
}

/// Per-context novel fact and cluster counts. Novel facts are clustered in
/// embedding space at `cluster_eps`.
pub fn novelty(
    gen_sets: &[Vec<FactTriple>],
    contexts: &[String],
    pool: &[FactTriple],
    provider: &dyn EmbeddingProvider,
    scorer: &dyn RelevanceScorer,
    cluster_eps: f64,
) -> Result<Vec<NoveltyRecord>> {
    let pool_v = provider.vectors(pool)?;
    let mut out = Vec::with_capacity(gen_sets.len());
    for (ci, (gen, ctx)) in gen_sets.iter().zip(contexts).enumerate() {
        let gv = provider.vectors(gen)?;
        let mut novel = Vec::new();
        for (i, f) in gen.iter().enumerate() {
            let max_cos = pool_v.iter().map(|p| cosine(&gv[i], p)).fold(f64::NEG_INFINITY, f64::max);
            if is_novel(max_cos, scorer.score(ci, ctx, f)?) {
                novel.push(gv[i].clone());
            }
        }
        let n_novel_clusters = cluster_facts(&Features::Vectors(novel.clone()), cluster_eps).n_clusters;
        out.push(NoveltyRecord { n_novel_facts: novel.len(), n_novel_clusters });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert!(!is_novel(1.0, 0.99));
        assert!(is_novel(0.3, 0.99));
        assert!(!is_novel(0.3, 0.9));
    }
}
