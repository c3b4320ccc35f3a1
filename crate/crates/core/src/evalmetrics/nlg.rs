//! Surface metrics: BLEU-4, ROUGE-L and Distinct-4.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{FactTriple, RelationCatalog};

fn ngrams<S: AsRef<str>>(toks: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w.iter().map(|s| s.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU against several references: up to 4-grams, clipped counts,
/// add-one smoothing on orders ≥ 2 and the closest-length brevity penalty.
pub fn bleu<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let c = ngrams(cand, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in refs {
            for (g, k) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let total: usize = c.values().sum();
        let matched: usize = c.iter().map(|(g, k)| (*k).min(*max_ref.get(g).unwrap_or(&0))).sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += 0.25 * p.ln();
    }
    let c = cand.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by(|a, b| ((*a as f64 - c).abs(), *a).partial_cmp(&((*b as f64 - c).abs(), *b)).unwrap())
        .unwrap_or(0) as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure (β = 1), best over references.
pub fn rouge_l<S: PartialEq>(cand: &[S], refs: &[Vec<S>]) -> f64 {
    refs.iter()
        .map(|r| {
            let l = lcs_len(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / cand.len() as f64, l / r.len() as f64);
            2.0 * p * rec / (p + rec)
        })
        .fold(0.0, f64::max)
}

/// Distinct 4-grams over all 4-grams of a list of token sequences.
pub fn distinct_4<S: AsRef<str>>(seqs: &[Vec<S>]) -> f64 {
    let mut set = HashSet::new();
    let mut total = 0;
    for s in seqs {
        if s.len() >= 4 {
            for w in s.windows(4) {
                set.insert(w.iter().map(|x| x.as_ref().to_string()).collect::<Vec<_>>());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        set.len() as f64 / total as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NlgScores {
    pub bleu: f64,
    pub rouge_l: f64,
    pub distinct_4: f64,
}

/// Per context: every generated fact is scored against all gold facts of its
/// context, averaged over facts; then averaged over contexts. Empty
/// generations score 0.
pub fn nlg_scores(gen_sets: &[Vec<FactTriple>], gold_sets: &[Vec<FactTriple>], catalog: &RelationCatalog) -> NlgScores {
    let n = gen_sets.len().min(gold_sets.len());
    if n == 0 {
        return NlgScores::default();
    }
    let mut acc = NlgScores::default();
    for (gen, gold) in gen_sets.iter().zip(gold_sets).take(n) {
        if gen.is_empty() {
            continue;
        }
        let refs: Vec<Vec<String>> = gold.iter().map(|f| f.surface_tokens(catalog)).collect();
        let cands: Vec<Vec<String>> = gen.iter().map(|f| f.surface_tokens(catalog)).collect();
        let k = cands.len() as f64;
        acc.bleu += cands.iter().map(|c| bleu(c, &refs)).sum::<f64>() / k;
        acc.rouge_l += cands.iter().map(|c| rouge_l(c, &refs)).sum::<f64>() / k;
        acc.distinct_4 += distinct_4(&cands);
    }
    NlgScores { bleu: acc.bleu / n as f64, rouge_l: acc.rouge_l / n as f64, distinct_4: acc.distinct_4 / n as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split(' ').collect()
    }

    #[test]
    fn exact_match_is_one() {
        let c = w("the cat sat on the mat");
        assert!((bleu(&c, std::slice::from_ref(&c)) - 1.0).abs() < 1e-12);
        assert!((rouge_l(&c, std::slice::from_ref(&c)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_lcs_example() {
        assert_eq!(lcs_len(&w("a b c d"), &w("a c d")), 3);
        let f = rouge_l(&w("a b c d"), &[w("a c d")]);
        assert!((f - 2.0 * 0.75 / 1.75).abs() < 1e-12);
    }

    #[test]
    fn brevity_penalty_applies() {
        let full = w("a b c d e f");
        let short = w("a b c");
        let s = bleu(&short, &[full]);
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn distinct_counts() {
        assert_eq!(distinct_4(&[w("a b c d"), w("a b c d")]), 0.5);
        assert_eq!(distinct_4::<&str>(&[w("a b")]), 0.0);
    }

    #[test]
    fn empty_generation_scores_zero() {
        let cat = RelationCatalog::atomic();
        let gold = vec![vec![FactTriple::new("a", "Causes", "b")]];
        assert_eq!(nlg_scores(&[vec![]], &gold, &cat), NlgScores::default());
        let s = nlg_scores(&gold, &gold, &cat);
        assert!((s.bleu - 1.0).abs() < 1e-12 && (s.rouge_l - 1.0).abs() < 1e-12);
    }
}
