use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::catalog::RelationCatalog;
use crate::corpus::vocab::{detokenize, normalize_text, tokenize, Vocabulary, BOS, EOK, EOS};
use crate::error::{Error, Result};

/// One `(head, relation, tail)` knowledge unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl FactTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Self { head: head.into(), relation: relation.into(), tail: tail.into() }
    }

    /// Lowercased, whitespace-normalized head and tail.
    pub fn normalized(&self) -> FactTriple {
        FactTriple {
            head: normalize_text(&self.head),
            relation: self.relation.clone(),
            tail: normalize_text(&self.tail),
        }
    }

    /// `head phrase tail` as one lowercased string.
    pub fn surface(&self, catalog: &RelationCatalog) -> String {
        detokenize(&self.surface_tokens(catalog))
    }

    /// Word tokens of `head phrase tail`, without sentence markers.
    pub fn surface_tokens(&self, catalog: &RelationCatalog) -> Vec<String> {
        let phrase = catalog.phrase(&self.relation).map(|p| p.into_owned()).unwrap_or_else(|_| self.relation.clone());
        let mut toks = tokenize(&self.head);
        toks.extend(tokenize(&phrase));
        toks.extend(tokenize(&self.tail));
        toks
    }
}

/// Ordered facts plus their unique heads, relations and tails (first-seen order).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KnowledgeSet {
    facts: Vec<FactTriple>,
    heads: Vec<String>,
    relations: Vec<String>,
    tails: Vec<String>,
}

fn unique<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    items.filter(|s| seen.insert(*s)).map(str::to_string).collect()
}

impl KnowledgeSet {
    pub fn new(facts: Vec<FactTriple>) -> Self {
        let heads = unique(facts.iter().map(|f| f.head.as_str()));
        let relations = unique(facts.iter().map(|f| f.relation.as_str()));
        let tails = unique(facts.iter().map(|f| f.tail.as_str()));
        Self { facts, heads, relations, tails }
    }

    pub fn facts(&self) -> &[FactTriple] {
        &self.facts
    }

    pub fn heads(&self) -> &[String] {
        &self.heads
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn tails(&self) -> &[String] {
        &self.tails
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Unique tails of facts whose head is `head`, first-seen order.
    pub fn tails_of(&self, head: &str) -> Vec<String> {
        unique(self.facts.iter().filter(|f| f.head == head).map(|f| f.tail.as_str()))
    }

    pub fn into_facts(self) -> Vec<FactTriple> {
        self.facts
    }
}

impl FromIterator<FactTriple> for KnowledgeSet {
    fn from_iter<I: IntoIterator<Item = FactTriple>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

/// A narrative context and its gold knowledge set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NarrativeSample {
    pub context: String,
    pub gold: KnowledgeSet,
}

impl NarrativeSample {
    pub fn new(context: impl Into<String>, gold: KnowledgeSet) -> Result<Self> {
        let context = context.into();
        if context.trim().is_empty() {
            return Err(Error::Input("narrative context is empty".into()));
        }
        Ok(Self { context, gold })
    }
}

/// What an embedding slot can hold.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum KnowledgeUnit {
    Fact(FactTriple),
    Entity(String),
    /// End-of-knowledge marker.
    Eok,
}

impl KnowledgeUnit {
    pub fn tokens(&self, catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Vec<u32>> {
        match self {
            KnowledgeUnit::Fact(k) => verbalize_fact(k, catalog, vocab),
            KnowledgeUnit::Entity(e) => Ok(vocab.encode_sentence(e)),
            KnowledgeUnit::Eok => Ok(vec![BOS, EOK, EOS]),
        }
    }
}

/// `<s> head phrase tail </s>` as token ids; unknown words become `<unk>`.
pub fn verbalize_fact(k: &FactTriple, catalog: &RelationCatalog, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let phrase = catalog.phrase(&k.relation)?;
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(&k.head));
    ids.extend(vocab.encode(&phrase));
    ids.extend(vocab.encode(&k.tail));
    ids.push(EOS);
    Ok(ids)
}

/// Strips sentence markers and everything after the first `</s>`.
pub fn strip_markers(ids: &[u32]) -> &[u32] {
    let body = ids.strip_prefix(&[BOS]).unwrap_or(ids);
    match body.iter().position(|&t| t == EOS) {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Whether a decoded sequence is the end-of-knowledge marker.
pub fn is_eok(ids: &[u32]) -> bool {
    strip_markers(ids).first() == Some(&EOK)
}

/// Recovers a triple from decoded tokens by locating a relation phrase with
/// non-empty text on both sides. The leftmost position wins; at one
/// position the longest phrase wins.
pub fn parse_fact(ids: &[u32], catalog: &RelationCatalog, vocab: &Vocabulary) -> Option<FactTriple> {
    let words: Vec<&str> = vocab.decode(strip_markers(ids));
    let phrases: Vec<(String, Vec<String>)> = catalog
        .labels()
        .map(|l| (l.clone(), tokenize(&catalog.phrase(l).expect("listed"))))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    for start in 1..words.len() {
        let best = phrases
            .iter()
            .filter(|(_, p)| start + p.len() < words.len() && words[start..start + p.len()].iter().zip(p).all(|(a, b)| *a == b))
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| b.0.cmp(&a.0)));
        if let Some((label, p)) = best {
            let head = detokenize(&words[..start]);
            let tail = detokenize(&words[start + p.len()..]);
            return Some(FactTriple::new(head, label.clone(), tail));
        }
    }
    None
}

/// Detokenized text of a decoded entity sequence.
pub fn parse_entity(ids: &[u32], vocab: &Vocabulary) -> Option<String> {
    let body = strip_markers(ids);
    if body.is_empty() {
        return None;
    }
    Some(detokenize(&vocab.decode(body)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_for(facts: &[FactTriple], cat: &RelationCatalog) -> Vocabulary {
        Vocabulary::build(&[], &KnowledgeSet::new(facts.to_vec()), cat, 1)
    }

    #[test]
    fn verbalize_matches_expected_layout() {
        let cat = RelationCatalog::atomic();
        let k = FactTriple::new("cap", "ObjectUse", "wear on head");
        let v = vocab_for(std::slice::from_ref(&k), &cat);
        let ids = verbalize_fact(&k, &cat, &v).unwrap();
        assert_eq!(v.decode(&ids).join(" "), "<s> cap used for wear on head </s>");
        assert_eq!(ids.len(), 1 + 2 + 3 + 2);
    }

    #[test]
    fn xreact_phrase_present() {
        let cat = RelationCatalog::atomic();
        let k = FactTriple::new("x", "xReact", "happy");
        let v = vocab_for(std::slice::from_ref(&k), &cat);
        let ids = verbalize_fact(&k, &cat, &v).unwrap();
        let text = detokenize(&v.decode(strip_markers(&ids)));
        assert!(text.contains("as a result, person x feels"), "{text}");
    }

    #[test]
    fn verbalize_then_parse_round_trips() {
        let cat = RelationCatalog::atomic();
        let facts = vec![
            FactTriple::new("Cap", "ObjectUse", "wear on head"),
            FactTriple::new("person x buys a hat", "xIntent", "to look good"),
            FactTriple::new("kite", "AtLocation", "the sky"),
        ];
        let v = vocab_for(&facts, &cat);
        for k in &facts {
            let ids = verbalize_fact(k, &cat, &v).unwrap();
            assert_eq!(parse_fact(&ids, &cat, &v).unwrap(), k.normalized());
            assert_eq!(detokenize(&v.decode(strip_markers(&ids))), k.surface(&cat));
        }
    }

    #[test]
    fn unknown_words_become_unk() {
        let cat = RelationCatalog::atomic();
        let v = vocab_for(&[FactTriple::new("cap", "ObjectUse", "head")], &cat);
        let ids = verbalize_fact(&FactTriple::new("zebra", "ObjectUse", "head"), &cat, &v).unwrap();
        assert_eq!(ids[1], crate::corpus::vocab::UNK);
    }

    #[test]
    fn unknown_relation_is_an_error() {
        let cat = RelationCatalog::atomic();
        let v = vocab_for(&[], &cat);
        assert!(verbalize_fact(&FactTriple::new("a", "Nope", "b"), &cat, &v).is_err());
    }

    #[test]
    fn knowledge_set_projections() {
        let ks = KnowledgeSet::new(vec![
            FactTriple::new("a", "Causes", "b"),
            FactTriple::new("a", "Causes", "b"),
            FactTriple::new("c", "xWant", "b"),
        ]);
        assert_eq!(ks.len(), 3);
        assert_eq!(ks.heads(), ["a", "c"]);
        assert_eq!(ks.relations(), ["Causes", "xWant"]);
        assert_eq!(ks.tails(), ["b"]);
    }

    #[test]
    fn eok_sequences() {
        let cat = RelationCatalog::atomic();
        let v = vocab_for(&[], &cat);
        let ids = KnowledgeUnit::Eok.tokens(&cat, &v).unwrap();
        assert!(is_eok(&ids));
        assert!(parse_fact(&ids, &cat, &v).is_none());
    }
}
