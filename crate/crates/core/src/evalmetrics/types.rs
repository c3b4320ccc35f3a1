//! Share of generated facts per relation group.

use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, RelationCatalog, RelationGroup};

/// Percentages per relation group, averaged over contexts with at least one fact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeProportions {
    pub physical: f64,
    pub event: f64,
    pub social: f64,
    pub other: f64,
    pub contexts: usize,
}

pub fn knowledge_type_proportions(gen_sets: &[Vec<FactTriple>], catalog: &RelationCatalog) -> TypeProportions {
    let mut out = TypeProportions::default();
    for set in gen_sets.iter().filter(|s| !s.is_empty()) {
        let n = set.len() as f64;
        let mut c = [0.0; 4];
        for f in set {
            let i = match catalog.group(&f.relation) {
                Some(RelationGroup::Physical) => 0,
                Some(RelationGroup::Event) => 1,
                Some(RelationGroup::Social) => 2,
                None => 3,
            };
            c[i] += 1.0;
        }
        out.physical += 100.0 * c[0] / n;
        out.event += 100.0 * c[1] / n;
        out.social += 100.0 * c[2] / n;
        out.other += 100.0 * c[3] / n;
        out.contexts += 1;
    }
    if out.contexts > 0 {
        let k = out.contexts as f64;
        out.physical /= k;
        out.event /= k;
        out.social /= k;
        out.other /= k;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn object_use_is_physical() {
        let cat = RelationCatalog::atomic();
        let p = knowledge_type_proportions(&[vec![FactTriple::new("cap", "ObjectUse", "wear")]], &cat);
        assert_eq!(p.physical, 100.0);
    }

    #[test]
    fn thirds_and_other() {
        let cat = RelationCatalog::atomic();
        let set = vec![
            FactTriple::new("a", "ObjectUse", "b"),
            FactTriple::new("a", "Causes", "b"),
            FactTriple::new("a", "xWant", "b"),
        ];
        let p = knowledge_type_proportions(&[set], &cat);
        assert!((p.physical + p.event + p.social - 100.0).abs() < 1e-9);
        assert!((p.event - 100.0 / 3.0).abs() < 1e-9);
        let q = knowledge_type_proportions(&[vec![FactTriple::new("a", "Nope", "b")]], &cat);
        assert_eq!(q.other, 100.0);
    }
}
