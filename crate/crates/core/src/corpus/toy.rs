//! Small synthetic corpora for smoke runs and overfit checks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::catalog::RelationCatalog;
use crate::corpus::triple::{FactTriple, KnowledgeSet, NarrativeSample};
use crate::rng::child_rng;

const ADJECTIVES: &[&str] = &["red", "old", "tiny", "warm", "noisy", "shiny", "broken", "wooden", "green", "soft"];
const NOUNS: &[&str] = &["kite", "boat", "lamp", "drum", "coat", "bike", "clock", "pan", "rope", "tent"];
const VERBS: &[&str] = &["fly", "sail", "shine", "play", "fold", "ride", "ring", "cook", "tie", "rest"];
const OBJECTS: &[&str] = &["outside", "at noon", "with friends", "all day", "in the rain", "slowly", "at home", "together"];
const NAMES: &[&str] = &["anna", "ben", "carla", "dev", "ella", "femi", "gus", "hana", "ivan", "jo"];
const ACTIONS: &[&str] = &["found", "fixed", "painted", "sold", "carried"];

/// `n_facts` distinct triples over a fixed word pool; every head carries
/// `facts_per_head` facts with distinct tails.
pub fn toy_kg(n_facts: usize, facts_per_head: usize, seed: u64) -> KnowledgeSet {
    let mut rng = child_rng(seed, "toy-kg");
    let catalog = RelationCatalog::atomic();
    let labels: Vec<String> = catalog.labels().cloned().collect();
    let mut heads: Vec<String> = ADJECTIVES
        .iter()
        .flat_map(|a| NOUNS.iter().map(move |n| format!("{a} {n}")))
        .collect();
    heads.shuffle(&mut rng);
    let tails: Vec<String> = VERBS
        .iter()
        .flat_map(|v| OBJECTS.iter().map(move |o| format!("{v} {o}")))
        .collect();
    let per_head = facts_per_head.max(1);
    let n_heads = n_facts.div_ceil(per_head);
    assert!(n_heads <= heads.len(), "word pool supports at most {} heads", heads.len());
    let mut facts = Vec::with_capacity(n_facts);
    for head in heads.iter().take(n_heads) {
        let mut used = BTreeSet::new();
        while used.len() < per_head && facts.len() < n_facts {
            let tail = tails[rng.gen_range(0..tails.len())].clone();
            if used.insert(tail.clone()) {
                let rel = labels[rng.gen_range(0..labels.len())].clone();
                facts.push(FactTriple::new(head.clone(), rel, tail));
            }
        }
    }
    KnowledgeSet::new(facts)
}

/// `n_contexts` narratives whose gold sets are drawn from `kg`: two distinct
/// heads per context, one or two facts per head. Each head is used once.
pub fn toy_narratives(kg: &KnowledgeSet, n_contexts: usize, seed: u64) -> Vec<NarrativeSample> {
    let mut rng = child_rng(seed, "toy-narratives");
    let mut heads: Vec<String> = kg.heads().to_vec();
    heads.shuffle(&mut rng);
    assert!(heads.len() >= 2 * n_contexts, "need two unused heads per context");
    let mut out = Vec::with_capacity(n_contexts);
    for i in 0..n_contexts {
        let pair = [&heads[2 * i], &heads[2 * i + 1]];
        let mut gold = Vec::new();
        for h in pair {
            let take = rng.gen_range(1..=2);
            gold.extend(kg.facts().iter().filter(|f| &f.head == h).take(take).cloned());
        }
        let name = NAMES[i % NAMES.len()];
        let action = ACTIONS[(i / NAMES.len()) % ACTIONS.len()];
        let context = format!("{name} {action} the {} . later {name} saw the {} .", pair[0], pair[1]);
        out.push(NarrativeSample::new(context, KnowledgeSet::new(gold)).expect("non-empty context"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_kg_is_distinct_and_sized() {
        let kg = toy_kg(200, 5, 1);
        assert_eq!(kg.len(), 200);
        let set: BTreeSet<_> = kg.facts().iter().collect();
        assert_eq!(set.len(), 200);
        assert_eq!(kg.heads().len(), 40);
        assert_eq!(toy_kg(200, 5, 1), kg);
    }

    #[test]
    fn toy_narratives_draw_from_kg() {
        let kg = toy_kg(200, 5, 1);
        let ns = toy_narratives(&kg, 20, 2);
        assert_eq!(ns.len(), 20);
        let contexts: BTreeSet<_> = ns.iter().map(|n| n.context.clone()).collect();
        assert_eq!(contexts.len(), 20);
        for n in &ns {
            assert!((2..=4).contains(&n.gold.len()));
            assert_eq!(n.gold.heads().len(), 2);
            assert!(n.gold.facts().iter().all(|f| kg.facts().contains(f)));
        }
    }
}
