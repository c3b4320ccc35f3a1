use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::catalog::RelationCatalog;
use crate::corpus::triple::{FactTriple, KnowledgeSet, NarrativeSample};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const FSEP: u32 = 4;
pub const EOK: u32 = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<s>", "</s>", "<unk>", "<fsep>", "<eok>"];

/// Lowercased word-level tokens; every punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_ascii()) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn glues_left(tok: &str) -> bool {
    matches!(tok, "," | "." | ";" | ":" | "!" | "?" | ")" | "]" | "}" | "'" | "/" | "-")
}

fn glues_right(tok: &str) -> bool {
    matches!(tok, "(" | "[" | "{" | "'" | "/" | "-")
}

/// Inverse of [`tokenize`] for text whose punctuation follows ordinary
/// spacing conventions.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for t in tokens {
        let t = t.as_ref();
        if let Some(p) = prev {
            if !glues_left(t) && !glues_right(p) {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

/// Lowercased, whitespace-normalized surface form.
pub fn normalize_text(text: &str) -> String {
    detokenize(&tokenize(text))
}

/// Token ↔ id bijection with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

pub fn relation_token(label: &str) -> String {
    format!("<rel:{label}>")
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary id {i} must be {s}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary from contexts, gold facts and the knowledge base.
    /// Words below `min_count` map to `<unk>`, except relation-phrase words,
    /// which are always kept. Order: specials, relation labels (sorted),
    /// then words by descending frequency, ties lexicographic.
    pub fn build(samples: &[NarrativeSample], kg: &KnowledgeSet, catalog: &RelationCatalog, min_count: usize) -> Self {
        let min_count = min_count.max(1);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut labels: BTreeSet<String> = BTreeSet::new();
        let mut forced: BTreeSet<String> = BTreeSet::new();
        let add_text = |text: &str, counts: &mut BTreeMap<String, usize>| {
            for t in tokenize(text) {
                *counts.entry(t).or_default() += 1;
            }
        };
        let mut add_fact = |k: &FactTriple, counts: &mut BTreeMap<String, usize>| {
            add_text(&k.head, counts);
            add_text(&k.tail, counts);
            if let Ok(phrase) = catalog.phrase(&k.relation) {
                for t in tokenize(&phrase) {
                    *counts.entry(t.clone()).or_default() += 1;
                    forced.insert(t);
                }
            }
            labels.insert(k.relation.clone());
        };
        for s in samples {
            add_text(&s.context, &mut counts);
            for k in s.gold.facts() {
                add_fact(k, &mut counts);
            }
        }
        for k in kg.facts() {
            add_fact(k, &mut counts);
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count || forced.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(labels.iter().map(|l| relation_token(l)));
        tokens.extend(words.into_iter().map(|(w, _)| w));
        Self::from_tokens(tokens).expect("constructed vocabulary is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&text)?;
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&VocabFile { tokens: self.tokens.clone() })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn relation_id(&self, label: &str) -> Option<u32> {
        self.lookup(&relation_token(label))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// `<s> text </s>`.
    pub fn encode_sentence(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation_and_lowercases() {
        assert_eq!(tokenize("As a result, Person X feels"), ["as", "a", "result", ",", "person", "x", "feels"]);
        assert_eq!(tokenize("  at/in/on "), ["at", "/", "in", "/", "on"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn detokenize_inverts_common_text() {
        for s in [
            "as a result, person x feels",
            "located or found at/in/on",
            "made (up) of",
            "wear on head",
            "x-ray machine",
            "person x's hat.",
        ] {
            assert_eq!(detokenize(&tokenize(s)), s, "{s}");
        }
    }

    fn sample(ctx: &str) -> NarrativeSample {
        NarrativeSample::new(ctx, KnowledgeSet::default()).unwrap()
    }

    #[test]
    fn min_count_threshold() {
        let cat = RelationCatalog::atomic();
        let v = Vocabulary::build(&[sample("a a b")], &KnowledgeSet::default(), &cat, 2);
        assert!(v.lookup("a").is_some());
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.len(), SPECIALS.len() + 1);
    }

    #[test]
    fn build_is_deterministic() {
        let cat = RelationCatalog::atomic();
        let s = [sample("the cat sat on the mat"), sample("a dog sat")];
        let a = Vocabulary::build(&s, &KnowledgeSet::default(), &cat, 1);
        let b = Vocabulary::build(&s, &KnowledgeSet::default(), &cat, 1);
        assert_eq!(a, b);
        assert_eq!(a.token(SPECIALS.len() as u32), "sat");
    }

    #[test]
    fn save_load_roundtrip() {
        let cat = RelationCatalog::atomic();
        let v = Vocabulary::build(&[sample("one two two")], &KnowledgeSet::default(), &cat, 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
