//! Fact similarity under the two geometries, plus embedding providers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, RelationCatalog, Vocabulary};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    Edit,
    Embedding,
}

impl Geometry {
    pub fn name(self) -> &'static str {
        match self {
            Geometry::Edit => "edit",
            Geometry::Embedding => "embedding",
        }
    }
}

/// Word-level Levenshtein distance.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `Edit / MaxLen`; 0 when both sequences are empty.
pub fn normalized_edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> f64 {
    let max = a.len().max(b.len());
    if max == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / max as f64
}

pub fn edit_similarity(k1: &FactTriple, k2: &FactTriple, catalog: &RelationCatalog) -> f64 {
    1.0 - normalized_edit_distance(&k1.surface_tokens(catalog), &k2.surface_tokens(catalog))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Negative cosines clipped to zero.
pub fn embedding_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).max(0.0)
}

/// Supplies a fixed-dimension vector for any fact.
pub trait EmbeddingProvider {
    fn vectors(&self, facts: &[FactTriple]) -> Result<Vec<Vec<f64>>>;
}

/// Vectors read from `vectors.tsv`: fact surface string, TAB, space-separated floats.
#[derive(Clone, Debug, Default)]
pub struct VectorFile {
    table: HashMap<String, Vec<f64>>,
    dim: usize,
    catalog: RelationCatalog,
}

impl VectorFile {
    pub fn load(path: &Path, catalog: RelationCatalog) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |m: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message: m };
            let (key, vals) = line.split_once('\t').ok_or_else(|| parse_err("missing TAB separator".into()))?;
            let v = vals
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| parse_err(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => return Err(parse_err(format!("expected {d} values, got {}", v.len()))),
                _ => {}
            }
            table.insert(key.trim().to_string(), v);
        }
        Ok(Self { table, dim: dim.unwrap_or(0), catalog })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

impl EmbeddingProvider for VectorFile {
    fn vectors(&self, facts: &[FactTriple]) -> Result<Vec<Vec<f64>>> {
        facts
            .iter()
            .map(|f| {
                let key = f.surface(&self.catalog);
                self.table.get(&key).cloned().ok_or(Error::MissingVector(key))
            })
            .collect()
    }
}

/// Vectors from a trained fact embedder.
pub struct InternalEmbedder<'a, T: Scalar> {
    pub embedder: &'a Embedder<T>,
    pub vocab: &'a Vocabulary,
    pub catalog: &'a RelationCatalog,
}

impl<T: Scalar> EmbeddingProvider for InternalEmbedder<'_, T> {
    fn vectors(&self, facts: &[FactTriple]) -> Result<Vec<Vec<f64>>> {
        let units: Vec<_> = facts.iter().map(|f| crate::corpus::KnowledgeUnit::Fact(f.clone())).collect();
        let t: Tensor<T> = self.embedder.embed_units(&units, self.catalog, self.vocab)?;
        Ok((0..t.rows()).map(|r| t.row(r).iter().map(|v| v.as_f64()).collect()).collect())
    }
}

/// Per-fact features for one geometry.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Words(Vec<Vec<String>>),
    Vectors(Vec<Vec<f64>>),
}

impl Features {
    pub fn build(
        facts: &[FactTriple],
        geometry: Geometry,
        catalog: &RelationCatalog,
        provider: Option<&dyn EmbeddingProvider>,
    ) -> Result<Self> {
        match geometry {
            Geometry::Edit => Ok(Features::Words(facts.iter().map(|f| f.surface_tokens(catalog)).collect())),
            Geometry::Embedding => {
                let p = provider.ok_or_else(|| Error::Config("embedding geometry needs a vector provider".into()))?;
                Ok(Features::Vectors(p.vectors(facts)?))
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Features::Words(w) => w.len(),
            Features::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometry(&self) -> Geometry {
        match self {
            Features::Words(_) => Geometry::Edit,
            Features::Vectors(_) => Geometry::Embedding,
        }
    }

    /// Clustering distance between item `i` of `self` and item `j` of `other`.
    pub fn distance(&self, i: usize, other: &Features, j: usize) -> f64 {
        match (self, other) {
            (Features::Words(a), Features::Words(b)) => normalized_edit_distance(&a[i], &b[j]),
            (Features::Vectors(a), Features::Vectors(b)) => euclidean(&a[i], &b[j]),
            _ => panic!("mixed geometries"),
        }
    }

    /// Similarity in `[0, 1]` between item `i` of `self` and item `j` of `other`.
    pub fn similarity(&self, i: usize, other: &Features, j: usize) -> f64 {
        match (self, other) {
            (Features::Words(a), Features::Words(b)) => 1.0 - normalized_edit_distance(&a[i], &b[j]),
            (Features::Vectors(a), Features::Vectors(b)) => embedding_similarity(&a[i], &b[j]),
            _ => panic!("mixed geometries"),
        }
    }

    pub fn select(&self, idx: &[usize]) -> Features {
        match self {
            Features::Words(w) => Features::Words(idx.iter().map(|&i| w[i].clone()).collect()),
            Features::Vectors(v) => Features::Vectors(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edit_examples() {
        let a: Vec<&str> = "a b c".split(' ').collect();
        let b: Vec<&str> = "a b d".split(' ').collect();
        assert!((1.0 - normalized_edit_distance(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(normalized_edit_distance::<&str>(&[], &[]), 0.0);
        assert_eq!(levenshtein(&["x"], &[] as &[&str]), 1);
        let cat = RelationCatalog::atomic();
        let k = FactTriple::new("cap", "ObjectUse", "wear");
        assert_eq!(edit_similarity(&k, &k, &cat), 1.0);
    }

    #[test]
    fn cosine_clipping() {
        assert!((embedding_similarity(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-12);
        assert_eq!(embedding_similarity(&[1.0, 2.0], &[-1.0, -2.0]), 0.0);
    }

    #[test]
    fn vector_file_round_trip_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vectors.tsv");
        std::fs::write(&p, "cap used for wear\t1 0 0\nhat used for wear\t0 1 0\n").unwrap();
        let cat = RelationCatalog::atomic();
        let vf = VectorFile::load(&p, cat).unwrap();
        assert_eq!(vf.dim(), 3);
        let v = vf.vectors(&[FactTriple::new("cap", "ObjectUse", "wear")]).unwrap();
        assert_eq!(v[0], vec![1.0, 0.0, 0.0]);
        match vf.vectors(&[FactTriple::new("x", "ObjectUse", "y")]) {
            Err(Error::MissingVector(k)) => assert_eq!(k, "x used for y"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn edit_similarity_is_symmetric_and_bounded(
            a in proptest::collection::vec(0u8..4, 0..8),
            b in proptest::collection::vec(0u8..4, 0..8),
        ) {
            let d1 = normalized_edit_distance(&a, &b);
            let d2 = normalized_edit_distance(&b, &a);
            prop_assert_eq!(d1, d2);
            prop_assert!((0.0..=1.0).contains(&d1));
        }

        #[test]
        fn embedding_similarity_in_unit_interval(
            a in proptest::collection::vec(-5.0f64..5.0, 4),
            b in proptest::collection::vec(-5.0f64..5.0, 4),
        ) {
            let s = embedding_similarity(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
