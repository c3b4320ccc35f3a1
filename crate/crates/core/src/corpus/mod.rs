//! Data model, file ingestion, tokenization and the relation catalog.

pub mod catalog;
pub mod ingest;
pub mod toy;
pub mod triple;
pub mod vocab;

pub use catalog::{RelationCatalog, RelationGroup, RelationInfo};
pub use ingest::{ingest_kg, ingest_narratives, write_kg, write_narratives, IngestReport};
pub use triple::{
    is_eok, parse_entity, parse_fact, strip_markers, verbalize_fact, FactTriple, KnowledgeSet, KnowledgeUnit,
    NarrativeSample,
};
pub use vocab::{detokenize, normalize_text, tokenize, Vocabulary};

/// Contexts may span several sentences; they are joined with single spaces.
pub fn join_context<S: AsRef<str>>(sentences: &[S]) -> String {
    sentences.iter().map(|s| s.as_ref().trim()).filter(|s| !s.is_empty()).collect::<Vec<_>>().join(" ")
}
