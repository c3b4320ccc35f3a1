//! Density clustering with `min_samples = 1`, i.e. connected components of
//! the ε-neighborhood graph.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::evalmetrics::similarity::{Features, Geometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactClustering {
    /// Cluster id of every fact; ids are numbered in first-seen order.
    pub assignment: Vec<usize>,
    pub n_clusters: usize,
    pub geometry: Geometry,
    pub eps: f64,
}

impl FactClustering {
    pub fn n_facts(&self) -> usize {
        self.assignment.len()
    }

    /// Member indices of every cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }
}

/// Breadth-first expansion over points within distance `eps` (inclusive).
pub fn cluster_by<F: Fn(usize, usize) -> f64>(n: usize, eps: f64, dist: F) -> (Vec<usize>, usize) {
    let mut assignment = vec![usize::MAX; n];
    let mut next = 0;
    for seed in 0..n {
        if assignment[seed] != usize::MAX {
            continue;
        }
        assignment[seed] = next;
        let mut queue = VecDeque::from([seed]);
        while let Some(p) = queue.pop_front() {
            for q in 0..n {
                if assignment[q] == usize::MAX && dist(p, q) <= eps {
                    assignment[q] = next;
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    (assignment, next)
}

pub fn cluster_facts(features: &Features, eps: f64) -> FactClustering {
    let (assignment, n_clusters) = cluster_by(features.len(), eps, |i, j| features.distance(i, features, j));
    FactClustering { assignment, n_clusters, geometry: features.geometry(), eps }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(v: &[f64]) -> Features {
        Features::Vectors(v.iter().map(|x| vec![*x]).collect())
    }

    #[test]
    fn extremes() {
        let f = points(&[0.0, 1.0, 3.0, 7.0]);
        assert_eq!(cluster_facts(&f, 0.5).n_clusters, 4);
        assert_eq!(cluster_facts(&f, 10.0).n_clusters, 1);
        let c = cluster_facts(&f, 2.0);
        assert_eq!(c.assignment, vec![0, 0, 0, 1]);
        assert_eq!(c.members(), vec![vec![0, 1, 2], vec![3]]);
    }

    #[test]
    fn duplicates_form_one_cluster() {
        let f = Features::Words(vec![vec!["a".into()]; 5]);
        assert_eq!(cluster_facts(&f, 1e-9).n_clusters, 1);
    }

    #[test]
    fn empty_input() {
        let c = cluster_facts(&Features::Words(vec![]), 0.3);
        assert_eq!(c.n_clusters, 0);
    }
}
