//! Relevance, alignment and their harmonic mean, plus relevance scorers.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::corpus::{tokenize, FactTriple, NarrativeSample, RelationCatalog, Vocabulary};
use crate::entitypipe::{expanded_context, ClassifierConfig, RelationClassifier};
use crate::error::{Error, Result};
use crate::evalmetrics::cluster::FactClustering;
use crate::evalmetrics::similarity::Features;
use crate::scalar::Scalar;

/// Scores how relevant a fact is to a context, in `[0, 1]`.
pub trait RelevanceScorer {
    fn score(&self, context_id: usize, context: &str, fact: &FactTriple) -> Result<f64>;
}

/// Mean over clusters of the mean member score; `None` for an empty clustering.
pub fn relevance(clustering: &FactClustering, scores: &[f64]) -> Option<f64> {
    if clustering.n_clusters == 0 {
        return None;
    }
    let members = clustering.members();
    let total: f64 = members.iter().map(|m| m.iter().map(|&i| scores[i]).sum::<f64>() / m.len() as f64).sum();
    Some(total / clustering.n_clusters as f64)
}

/// Mean over gold clusters of the best similarity between any generated fact
/// and any cluster member; 0 for an empty generation.
pub fn alignment(generated: &Features, gold: &Features, gold_clustering: &FactClustering) -> f64 {
    if generated.is_empty() || gold_clustering.n_clusters == 0 {
        return 0.0;
    }
    let best_per_gold: Vec<f64> = (0..gold.len())
        .map(|j| (0..generated.len()).map(|i| generated.similarity(i, gold, j)).fold(0.0, f64::max))
        .collect();
    let members = gold_clustering.members();
    members.iter().map(|m| m.iter().map(|&j| best_per_gold[j]).fold(0.0, f64::max)).sum::<f64>()
        / gold_clustering.n_clusters as f64
}

pub fn ra_f1(rel: f64, align: f64) -> f64 {
    if rel + align <= 0.0 {
        0.0
    } else {
        2.0 * rel * align / (rel + align)
    }
}

/// Precomputed scores from `scores.jsonl` (`{"context_id","fact","score"}`),
/// keyed by context id and fact surface string.
pub struct FileScorer {
    table: HashMap<(usize, String), f64>,
    catalog: RelationCatalog,
}

#[derive(Deserialize)]
struct ScoreRecord {
    context_id: usize,
    fact: String,
    score: f64,
}

impl FileScorer {
    pub fn load(path: &Path, catalog: RelationCatalog) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ScoreRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })?;
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("score {} outside [0,1]", rec.score),
                });
            }
            table.insert((rec.context_id, rec.fact.trim().to_lowercase()), rec.score);
        }
        Ok(Self { table, catalog })
    }
}

impl RelevanceScorer for FileScorer {
    fn score(&self, context_id: usize, _context: &str, fact: &FactTriple) -> Result<f64> {
        let key = fact.surface(&self.catalog);
        self.table
            .get(&(context_id, key.clone()))
            .copied()
            .ok_or_else(|| Error::Input(format!("no relevance score for context {context_id}, fact `{key}`")))
    }
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "of", "to", "in", "on", "at", "for", "with", "is", "are", "was", "were", "be",
    "it", "its", "as", "by", "from", "that", "this", "person", "x", "y", "has", "have", "had", ".", ",", "!", "?",
    "'", "\"", "-", "before", "after", "then", "later", "so", "because",
];

/// Jaccard overlap between the content words of the fact and the context.
pub struct OverlapScorer {
    pub catalog: RelationCatalog,
}

fn content_words(text: &str) -> HashSet<String> {
    tokenize(text).into_iter().filter(|w| !STOPWORDS.contains(&w.as_str())).collect()
}

impl RelevanceScorer for OverlapScorer {
    fn score(&self, _context_id: usize, context: &str, fact: &FactTriple) -> Result<f64> {
        let f = content_words(&format!("{} {}", fact.head, fact.tail));
        let c = content_words(context);
        let union = f.union(&c).count();
        if union == 0 {
            return Ok(0.0);
        }
        Ok(f.intersection(&c).count() as f64 / union as f64)
    }
}

/// Binary classifier over `<s> context <fsep> fact </s>`; the score is the
/// probability of the label `relevant`.
pub struct ClassifierScorer<'a, T: Scalar> {
    pub classifier: &'a RelationClassifier<T>,
    pub vocab: &'a Vocabulary,
    pub catalog: &'a RelationCatalog,
    pub max_len: usize,
}

pub const RELEVANT: &str = "relevant";
pub const IRRELEVANT: &str = "irrelevant";

impl<T: Scalar> RelevanceScorer for ClassifierScorer<'_, T> {
    fn score(&self, _context_id: usize, context: &str, fact: &FactTriple) -> Result<f64> {
        let idx = self
            .classifier
            .labels()
            .iter()
            .position(|l| l == RELEVANT)
            .ok_or_else(|| Error::Config("scorer classifier lacks a `relevant` label".into()))?;
        let toks = expanded_context(context, &[&fact.surface(self.catalog)], self.vocab, self.max_len)?;
        Ok(self.classifier.scores(&toks)?[idx])
    }
}

/// Trains a relevance classifier. Gold facts of a context are positives; gold
/// facts of the following context (cyclically) that are absent from it are
/// negatives.
pub fn train_relevance_classifier<T: Scalar>(
    samples: &[NarrativeSample],
    catalog: &RelationCatalog,
    vocab: &Vocabulary,
    cfg: &ClassifierConfig,
) -> Result<(RelationClassifier<T>, Vec<f64>)> {
    let labels = vec![IRRELEVANT.to_string(), RELEVANT.to_string()];
    let mut clf = RelationClassifier::init(&cfg.model, labels, vocab.len(), cfg.seed)?;
    let mut data = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let own: HashSet<&FactTriple> = s.gold.facts().iter().collect();
        let pair = |f: &FactTriple| expanded_context(&s.context, &[&f.surface(catalog)], vocab, cfg.model.max_len);
        for f in s.gold.facts() {
            data.push((pair(f)?, 1));
        }
        if samples.len() > 1 {
            for f in samples[(i + 1) % samples.len()].gold.facts().iter().filter(|f| !own.contains(f)) {
                data.push((pair(f)?, 0));
            }
        }
    }
    let curve = clf.train(&data, cfg)?;
    Ok((clf, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalmetrics::cluster::cluster_facts;
    use crate::evalmetrics::similarity::Geometry;

    fn clustering(assignment: Vec<usize>) -> FactClustering {
        let n = assignment.iter().max().map_or(0, |m| m + 1);
        FactClustering { assignment, n_clusters: n, geometry: Geometry::Edit, eps: 0.1 }
    }

    #[test]
    fn relevance_nested_means() {
        assert_eq!(relevance(&clustering(vec![0, 0]), &[0.4, 0.6]), Some(0.5));
        assert_eq!(relevance(&clustering(vec![0, 1]), &[1.0, 0.0]), Some(0.5));
        assert_eq!(relevance(&clustering(vec![]), &[]), None);
    }

    #[test]
    fn ra_f1_identities() {
        assert_eq!(ra_f1(0.5, 0.5), 0.5);
        assert_eq!(ra_f1(0.7, 0.0), 0.0);
        assert_eq!(ra_f1(0.0, 0.0), 0.0);
        assert!((ra_f1(0.6639, 0.7438) - 0.7016).abs() < 5e-5);
    }

    #[test]
    fn self_alignment_is_one_and_empty_is_zero() {
        let f = Features::Words(vec![vec!["a".into(), "b".into()], vec!["c".into()]]);
        let c = cluster_facts(&f, 0.3);
        assert_eq!(alignment(&f, &f, &c), 1.0);
        assert_eq!(alignment(&Features::Words(vec![]), &f, &c), 0.0);
    }

    #[test]
    fn overlap_scorer_bounds() {
        let s = OverlapScorer { catalog: RelationCatalog::atomic() };
        let f = FactTriple::new("red kite", "AtLocation", "sky");
        let v = s.score(0, "anna flew the red kite in the sky .", &f).unwrap();
        assert!(v > 0.0 && v <= 1.0);
        assert_eq!(s.score(0, "nothing shared here", &f).unwrap(), 0.0);
    }

    #[test]
    fn file_scorer_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.jsonl");
        std::fs::write(&p, "{\"context_id\":0,\"fact\":\"cap used for wear\",\"score\":0.8}\n").unwrap();
        let s = FileScorer::load(&p, RelationCatalog::atomic()).unwrap();
        assert_eq!(s.score(0, "", &FactTriple::new("cap", "ObjectUse", "wear")).unwrap(), 0.8);
        assert!(s.score(1, "", &FactTriple::new("cap", "ObjectUse", "wear")).is_err());
    }
}
