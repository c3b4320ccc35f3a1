//! Triple-matching precision/recall/F1 under exact, partial and strict
//! element matching, with an optimal one-to-one pairing of triples.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, FactTriple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchRegime {
    Exact,
    Partial,
    Strict,
}

pub const REGIMES: [MatchRegime; 3] = [MatchRegime::Exact, MatchRegime::Partial, MatchRegime::Strict];

/// Largest `P(n, k)` solved by exhaustive enumeration; beyond it the
/// Hungarian method is used.
pub const ENUMERATION_LIMIT: u128 = 100_000;

fn elements(f: &FactTriple) -> [String; 3] {
    [f.head.trim().to_lowercase(), f.relation.trim().to_lowercase(), f.tail.trim().to_lowercase()]
}

fn partial_match(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let ta: HashSet<String> = tokenize(a).into_iter().collect();
    tokenize(b).into_iter().any(|t| ta.contains(&t))
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Number of matched elements (0..=3) between two triples.
pub fn pair_weight(g: &FactTriple, r: &FactTriple, regime: MatchRegime) -> usize {
    let (a, b) = (elements(g), elements(r));
    match regime {
        MatchRegime::Strict => (0..3).filter(|&i| a[i] == b[i]).count(),
        MatchRegime::Exact => PERMS.iter().map(|p| (0..3).filter(|&i| a[i] == b[p[i]]).count()).max().unwrap_or(0),
        MatchRegime::Partial => {
            PERMS.iter().map(|p| (0..3).filter(|&i| partial_match(&a[i], &b[p[i]])).count()).max().unwrap_or(0)
        }
    }
}

fn permutations_count(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128))
}

/// Maximum total weight of a one-to-one pairing by exhaustive search.
pub fn best_assignment_enumerate(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    // Enumerate injections from the smaller side.
    let transposed;
    let m: &[Vec<f64>] = if rows <= cols {
        w
    } else {
        transposed = (0..cols).map(|c| (0..rows).map(|r| w[r][c]).collect()).collect::<Vec<Vec<f64>>>();
        &transposed
    };
    fn rec(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == m.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(m[row][c] + rec(m, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let mut used = vec![false; m[0].len()];
    rec(m, 0, &mut used)
}

/// Maximum total weight of a one-to-one pairing (Hungarian method,
/// potentials form, `O(n²m)`).
pub fn best_assignment_hungarian(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let (n, m, cost): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if rows <= cols {
        (rows, cols, Box::new(|i, j| -w[i][j]))
    } else {
        (cols, rows, Box::new(|i, j| -w[j][i]))
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| -cost(p[j] - 1, j - 1)).sum()
}

pub fn best_assignment(w: &[Vec<f64>]) -> f64 {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if permutations_count(rows.max(cols), rows.min(cols)) <= ENUMERATION_LIMIT {
        best_assignment_enumerate(w)
    } else {
        best_assignment_hungarian(w)
    }
}

/// Matched element count of the optimal pairing for one context.
pub fn matched_elements(gen: &[FactTriple], gold: &[FactTriple], regime: MatchRegime) -> usize {
    let w: Vec<Vec<f64>> = gen.iter().map(|g| gold.iter().map(|r| pair_weight(g, r, regime) as f64).collect()).collect();
    best_assignment(&w).round() as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WebNlgScores {
    pub exact: Prf,
    pub partial: Prf,
    pub strict: Prf,
}

impl WebNlgScores {
    pub fn get(&self, r: MatchRegime) -> Prf {
        match r {
            MatchRegime::Exact => self.exact,
            MatchRegime::Partial => self.partial,
            MatchRegime::Strict => self.strict,
        }
    }
}

/// Micro-averaged scores: matched elements over `3·|generated|` and `3·|gold|`
/// summed across contexts. Precision is 0 when nothing was generated.
pub fn webnlg_scores(gen_sets: &[Vec<FactTriple>], gold_sets: &[Vec<FactTriple>]) -> WebNlgScores {
    let mut out = WebNlgScores::default();
    let n_gen: usize = gen_sets.iter().map(Vec::len).sum();
    let n_gold: usize = gold_sets.iter().map(Vec::len).sum();
    for regime in REGIMES {
        let matched: usize = gen_sets.iter().zip(gold_sets).map(|(g, r)| matched_elements(g, r, regime)).sum();
        let precision = if n_gen == 0 { 0.0 } else { matched as f64 / (3 * n_gen) as f64 };
        let recall = if n_gold == 0 { 0.0 } else { matched as f64 / (3 * n_gold) as f64 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let prf = Prf { precision, recall, f1 };
        match regime {
            MatchRegime::Exact => out.exact = prf,
            MatchRegime::Partial => out.partial = prf,
            MatchRegime::Strict => out.strict = prf,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_and_empty() {
        let g = vec![vec![FactTriple::new("a", "r", "b"), FactTriple::new("c", "s", "d")]];
        let s = webnlg_scores(&g, &g);
        for r in REGIMES {
            assert_eq!(s.get(r), Prf { precision: 1.0, recall: 1.0, f1: 1.0 });
        }
        let e = webnlg_scores(&[vec![]], &g);
        assert_eq!(e.exact, Prf::default());
    }

    #[test]
    fn regimes_differ_on_swapped_elements() {
        let g = FactTriple::new("paris", "capital", "france");
        let r = FactTriple::new("france", "capital", "paris");
        assert_eq!(pair_weight(&g, &r, MatchRegime::Strict), 1);
        assert_eq!(pair_weight(&g, &r, MatchRegime::Exact), 3);
        let p = FactTriple::new("paris city", "capital of", "france");
        assert_eq!(pair_weight(&g, &p, MatchRegime::Partial), 3);
        assert_eq!(pair_weight(&g, &p, MatchRegime::Exact), 1);
    }

    #[test]
    fn hungarian_on_rectangles() {
        let w = vec![vec![3.0, 1.0, 0.0], vec![2.0, 3.0, 1.0]];
        assert_eq!(best_assignment_hungarian(&w), 6.0);
        let t = vec![vec![3.0, 2.0], vec![1.0, 3.0], vec![0.0, 1.0]];
        assert_eq!(best_assignment_hungarian(&t), 6.0);
        assert_eq!(best_assignment_enumerate(&t), 6.0);
    }

    proptest! {
        #[test]
        fn hungarian_equals_enumeration(
            rows in 1usize..6,
            cols in 1usize..6,
            vals in proptest::collection::vec(0u8..4, 36),
        ) {
            let w: Vec<Vec<f64>> = (0..rows).map(|i| (0..cols).map(|j| vals[i * 6 + j] as f64).collect()).collect();
            prop_assert_eq!(best_assignment_hungarian(&w), best_assignment_enumerate(&w));
        }
    }
}
