//! Corpus-level evaluation: per-threshold, per-context records and their
//! averages, plus the JSON/markdown report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, RelationCatalog};
use crate::error::{Error, Result};
use crate::evalmetrics::cluster::cluster_facts;
use crate::evalmetrics::nlg::NlgScores;
use crate::evalmetrics::novelty::NoveltyRecord;
use crate::evalmetrics::relevance::{alignment, ra_f1, relevance, RelevanceScorer};
use crate::evalmetrics::similarity::{EmbeddingProvider, Features, Geometry};
use crate::evalmetrics::threshold::auto_threshold_range;
use crate::evalmetrics::types::TypeProportions;
use crate::evalmetrics::webnlg::WebNlgScores;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdSpec {
    Auto,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub geometries: Vec<Geometry>,
    pub thresholds: ThresholdSpec,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { geometries: vec![Geometry::Edit], thresholds: ThresholdSpec::Auto }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub n_facts: f64,
    pub n_clusters: f64,
    /// Absent when no generated facts exist anywhere in the average.
    pub relevance: Option<f64>,
    pub alignment: f64,
    pub ra_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub eps: f64,
    pub n_facts: usize,
    pub n_clusters: usize,
    pub relevance: Option<f64>,
    pub alignment: f64,
    pub ra_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub context_id: usize,
    pub records: Vec<ThresholdRecord>,
    pub mean: Averages,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub geometry: Geometry,
    pub thresholds: Vec<f64>,
    pub contexts: Vec<ContextRecord>,
    pub corpus: Averages,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    /// Hash carried by the evaluated generations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation_hash: Option<String>,
    pub geometries: Vec<GeometryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlg: Option<NlgScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub webnlg: Option<WebNlgScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub novelty: Option<Vec<NoveltyRecord>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub types: Option<TypeProportions>,
}

fn mean_opt(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Averages of a list of rows given as `(n_facts, n_clusters, rel, align, f1)`.
fn average(rows: &[(f64, f64, Option<f64>, f64, f64)]) -> Averages {
    let k = rows.len().max(1) as f64;
    Averages {
        n_facts: rows.iter().map(|r| r.0).sum::<f64>() / k,
        n_clusters: rows.iter().map(|r| r.1).sum::<f64>() / k,
        relevance: mean_opt(rows.iter().map(|r| r.2)),
        alignment: rows.iter().map(|r| r.3).sum::<f64>() / k,
        ra_f1: rows.iter().map(|r| r.4).sum::<f64>() / k,
    }
}

/// Corpus averages recomputed from per-context means.
pub fn corpus_average(contexts: &[ContextRecord]) -> Averages {
    let rows: Vec<_> = contexts
        .iter()
        .map(|c| (c.mean.n_facts, c.mean.n_clusters, c.mean.relevance, c.mean.alignment, c.mean.ra_f1))
        .collect();
    average(&rows)
}

/// Relevance, alignment and RA-F1 per threshold and context, averaged over
/// thresholds then contexts, for every configured geometry.
pub fn evaluate_suite(
    gen_sets: &[Vec<FactTriple>],
    gold_sets: &[Vec<FactTriple>],
    contexts: &[String],
    cfg: &SuiteConfig,
    catalog: &RelationCatalog,
    provider: Option<&dyn EmbeddingProvider>,
    scorer: &dyn RelevanceScorer,
) -> Result<Vec<GeometryReport>> {
    if gen_sets.len() != gold_sets.len() || gen_sets.len() != contexts.len() {
        return Err(Error::Input(format!(
            "misaligned inputs: {} generated, {} gold, {} contexts",
            gen_sets.len(),
            gold_sets.len(),
            contexts.len()
        )));
    }
    let scores: Vec<Vec<f64>> = gen_sets
        .iter()
        .enumerate()
        .map(|(i, g)| g.iter().map(|f| scorer.score(i, &contexts[i], f)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &geometry in &cfg.geometries {
        let gen_f: Vec<Features> =
            gen_sets.iter().map(|g| Features::build(g, geometry, catalog, provider)).collect::<Result<_>>()?;
        let gold_f: Vec<Features> =
            gold_sets.iter().map(|g| Features::build(g, geometry, catalog, provider)).collect::<Result<_>>()?;
        let thresholds = match &cfg.thresholds {
            ThresholdSpec::Auto => auto_threshold_range(&gold_f, geometry),
            ThresholdSpec::Explicit(t) => {
                if t.is_empty() || t.iter().any(|e| !(*e > 0.0)) {
                    return Err(Error::Config("explicit thresholds must be positive and non-empty".into()));
                }
                t.clone()
            }
        };
        let mut records = Vec::with_capacity(gen_sets.len());
        for i in 0..gen_sets.len() {
            let mut per = Vec::with_capacity(thresholds.len());
            for &eps in &thresholds {
                let gc = cluster_facts(&gen_f[i], eps);
                let goldc = cluster_facts(&gold_f[i], eps);
                let rel = relevance(&gc, &scores[i]);
                let align = alignment(&gen_f[i], &gold_f[i], &goldc);
                per.push(ThresholdRecord {
                    eps,
                    n_facts: gen_sets[i].len(),
                    n_clusters: gc.n_clusters,
                    relevance: rel,
                    alignment: align,
                    ra_f1: ra_f1(rel.unwrap_or(0.0), align),
                });
            }
            let rows: Vec<_> = per
                .iter()
                .map(|r| (r.n_facts as f64, r.n_clusters as f64, r.relevance, r.alignment, r.ra_f1))
                .collect();
            records.push(ContextRecord { context_id: i, mean: average(&rows), records: per });
        }
        let corpus = corpus_average(&records);
        out.push(GeometryReport { geometry, thresholds, contexts: records, corpus });
    }
    Ok(out)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl MetricReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n\nconfig hash: `{}`\n", self.config_hash);
        if let Some(h) = &self.generation_hash {
            let _ = writeln!(s, "generations: `{h}`\n");
        }
        for g in &self.geometries {
            let _ = writeln!(s, "## {} geometry\n", g.geometry.name());
            let eps: Vec<String> = g.thresholds.iter().map(|e| format!("{e:.4}")).collect();
            let _ = writeln!(s, "thresholds: {}\n", eps.join(", "));
            let _ = writeln!(s, "| #Facts | #Clusters | Relevance | Alignment | RA-F1 |\n|---|---|---|---|---|");
            let c = &g.corpus;
            let _ = writeln!(
                s,
                "| {:.2} | {:.2} | {} | {} | {} |\n",
                c.n_facts,
                c.n_clusters,
                c.relevance.map_or("n/a".to_string(), pct),
                pct(c.alignment),
                pct(c.ra_f1)
            );
        }
        if let Some(n) = &self.nlg {
            let _ = writeln!(s, "## Surface metrics\n\nBLEU {} / ROUGE-L {} / Distinct-4 {}\n", pct(n.bleu), pct(n.rouge_l), pct(n.distinct_4));
        }
        if let Some(w) = &self.webnlg {
            let _ = writeln!(s, "## Triple matching\n\n| regime | P | R | F1 |\n|---|---|---|---|");
            for (name, p) in [("exact", w.exact), ("partial", w.partial), ("strict", w.strict)] {
                let _ = writeln!(s, "| {name} | {} | {} | {} |", pct(p.precision), pct(p.recall), pct(p.f1));
            }
            s.push('\n');
        }
        if let Some(n) = &self.novelty {
            let facts: usize = n.iter().map(|r| r.n_novel_facts).sum();
            let clusters: usize = n.iter().map(|r| r.n_novel_clusters).sum();
            let _ = writeln!(s, "## Novelty\n\nnovel facts {facts}, novel clusters {clusters}\n");
        }
        if let Some(t) = &self.types {
            let _ = writeln!(
                s,
                "## Knowledge types\n\nphysical {:.1}% / event {:.1}% / social {:.1}% / other {:.1}%",
                t.physical, t.event, t.social, t.other
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::relevance::OverlapScorer;

    #[test]
    fn self_generation_aligns_perfectly() {
        let cat = RelationCatalog::atomic();
        let gold = vec![
            vec![FactTriple::new("red kite", "AtLocation", "sky"), FactTriple::new("red kite", "ObjectUse", "fly")],
            vec![FactTriple::new("old boat", "ObjectUse", "sail away")],
        ];
        let ctx = vec!["the red kite in the sky".to_string(), "an old boat".to_string()];
        let scorer = OverlapScorer { catalog: cat.clone() };
        let cfg = SuiteConfig { geometries: vec![Geometry::Edit], thresholds: ThresholdSpec::Explicit(vec![0.3, 0.6]) };
        let r = evaluate_suite(&gold, &gold, &ctx, &cfg, &cat, None, &scorer).unwrap();
        for c in &r[0].contexts {
            assert!(c.records.iter().all(|t| t.alignment == 1.0));
        }
        let again = corpus_average(&r[0].contexts);
        assert_eq!(again, r[0].corpus);
    }

    #[test]
    fn misalignment_is_an_error() {
        let cat = RelationCatalog::atomic();
        let scorer = OverlapScorer { catalog: cat.clone() };
        let r = evaluate_suite(&[vec![]], &[], &[], &SuiteConfig::default(), &cat, None, &scorer);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn empty_generation_has_absent_relevance() {
        let cat = RelationCatalog::atomic();
        let scorer = OverlapScorer { catalog: cat.clone() };
        let gold = vec![vec![FactTriple::new("a", "Causes", "b")]];
        let r = evaluate_suite(&[vec![]], &gold, &["a b".into()], &SuiteConfig::default(), &cat, None, &scorer).unwrap();
        assert_eq!(r[0].corpus.relevance, None);
        assert_eq!(r[0].corpus.ra_f1, 0.0);
        let md = MetricReport { geometries: r, ..Default::default() }.to_markdown();
        assert!(md.contains("n/a"));
    }
}
