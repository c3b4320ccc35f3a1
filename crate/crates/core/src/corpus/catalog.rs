use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse knowledge type of a relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationGroup {
    Physical,
    Event,
    Social,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInfo {
    pub phrase: String,
    pub group: RelationGroup,
}

/// Relation label → surface phrase and group. An open catalog admits every
/// label, using the label itself as phrase.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RelationCatalog {
    entries: BTreeMap<String, RelationInfo>,
    open: bool,
}

const ATOMIC_RELATIONS: &[(&str, &str, RelationGroup)] = &[
    ("ObjectUse", "used for", RelationGroup::Physical),
    ("AtLocation", "located or found at/in/on", RelationGroup::Physical),
    ("MadeUpOf", "made (up) of", RelationGroup::Physical),
    ("HasProperty", "can be characterized by being/having", RelationGroup::Physical),
    ("CapableOf", "is/are capable of", RelationGroup::Physical),
    ("Desires", "desires", RelationGroup::Physical),
    ("NotDesires", "do(es) not desire", RelationGroup::Physical),
    ("IsAfter", "happens after", RelationGroup::Event),
    ("IsBefore", "happens before", RelationGroup::Event),
    ("HasSubEvent", "includes the event/action", RelationGroup::Event),
    ("HinderedBy", "can be hindered by", RelationGroup::Event),
    ("Causes", "causes", RelationGroup::Event),
    ("xReason", "because", RelationGroup::Event),
    ("xNeed", "but before, person X needs", RelationGroup::Social),
    ("xAttr", "person X is seen as", RelationGroup::Social),
    ("xEffect", "as a result, person X will", RelationGroup::Social),
    ("xReact", "as a result, person X feels", RelationGroup::Social),
    ("xWant", "as a result, person X wants", RelationGroup::Social),
    ("xIntent", "because person X wants", RelationGroup::Social),
    ("oEffect", "as a result, others will", RelationGroup::Social),
    ("oReact", "as a result, others feel", RelationGroup::Social),
    ("oWant", "as a result, others want", RelationGroup::Social),
];

impl RelationCatalog {
    /// The commonsense relation inventory with its surface phrases.
    pub fn atomic() -> Self {
        let entries = ATOMIC_RELATIONS
            .iter()
            .map(|(l, p, g)| (l.to_string(), RelationInfo { phrase: p.to_string(), group: *g }))
            .collect();
        Self { entries, open: false }
    }

    /// Catalog that admits any predicate (RDF data).
    pub fn open() -> Self {
        Self { entries: BTreeMap::new(), open: true }
    }

    pub fn from_entries(entries: BTreeMap<String, RelationInfo>) -> Result<Self> {
        for (label, info) in &entries {
            if info.phrase.trim().is_empty() {
                return Err(Error::Config(format!("relation `{label}` has an empty phrase")));
            }
        }
        Ok(Self { entries, open: false })
    }

    /// Reads `relations.json`: `{"label": {"phrase": str, "group": str}}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: BTreeMap<String, RelationInfo> = serde_json::from_str(&text)?;
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    pub fn contains(&self, label: &str) -> bool {
        self.open || self.entries.contains_key(label)
    }

    pub fn get(&self, label: &str) -> Option<Cow<'_, RelationInfo>> {
        match self.entries.get(label) {
            Some(info) => Some(Cow::Borrowed(info)),
            None if self.open && !label.trim().is_empty() => {
                Some(Cow::Owned(RelationInfo { phrase: label.to_string(), group: RelationGroup::Physical }))
            }
            None => None,
        }
    }

    pub fn phrase(&self, label: &str) -> Result<Cow<'_, str>> {
        match self.get(label) {
            Some(Cow::Borrowed(info)) => Ok(Cow::Borrowed(info.phrase.as_str())),
            Some(Cow::Owned(info)) => Ok(Cow::Owned(info.phrase)),
            None => Err(Error::UnknownRelation(label.to_string())),
        }
    }

    pub fn group(&self, label: &str) -> Option<RelationGroup> {
        self.get(label).map(|i| i.group)
    }

    /// Registers a label (used to close an open catalog over observed data).
    pub fn insert(&mut self, label: impl Into<String>, info: RelationInfo) {
        self.entries.insert(label.into(), info);
    }

    pub fn labels(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_catalog_has_three_groups() {
        let c = RelationCatalog::atomic();
        assert_eq!(c.len(), 22);
        assert_eq!(c.phrase("ObjectUse").unwrap(), "used for");
        assert_eq!(c.group("ObjectUse"), Some(RelationGroup::Physical));
        assert_eq!(c.group("Causes"), Some(RelationGroup::Event));
        assert_eq!(c.group("xReact"), Some(RelationGroup::Social));
        assert!(!c.contains("birthPlace"));
    }

    #[test]
    fn open_catalog_admits_predicates() {
        let c = RelationCatalog::open();
        assert!(c.contains("birthPlace"));
        assert_eq!(c.phrase("birthPlace").unwrap(), "birthPlace");
        assert_eq!(c.group("birthPlace"), Some(RelationGroup::Physical));
    }
}
