//! Evaluation: clustering-based diversity, relevance and alignment, novelty,
//! surface metrics, triple matching and knowledge-type proportions.

pub mod cluster;
pub mod nlg;
pub mod novelty;
pub mod relevance;
pub mod similarity;
pub mod suite;
pub mod threshold;
pub mod types;
pub mod webnlg;

pub use cluster::{cluster_by, cluster_facts, FactClustering};
pub use nlg::{bleu, distinct_4, nlg_scores, rouge_l, NlgScores};
pub use novelty::{is_novel, novelty, NoveltyRecord};
pub use relevance::{alignment, ra_f1, relevance, ClassifierScorer, FileScorer, OverlapScorer, RelevanceScorer};
pub use similarity::{
    cosine, edit_similarity, embedding_similarity, levenshtein, normalized_edit_distance, EmbeddingProvider, Features,
    Geometry, InternalEmbedder, VectorFile,
};
pub use suite::{corpus_average, evaluate_suite, Averages, ContextRecord, GeometryReport, MetricReport, SuiteConfig, ThresholdSpec};
pub use threshold::auto_threshold_range;
pub use types::{knowledge_type_proportions, TypeProportions};
pub use webnlg::{webnlg_scores, MatchRegime, Prf, WebNlgScores};
