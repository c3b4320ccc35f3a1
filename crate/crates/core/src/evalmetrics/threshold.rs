//! Automatic selection of the clustering-threshold range from gold sets.

use crate::evalmetrics::cluster::cluster_facts;
use crate::evalmetrics::similarity::{Features, Geometry};

pub const THRESHOLD_STEP: f64 = 0.05;
const GRID: usize = 20;

/// Mean gold cluster count at each candidate threshold.
fn mean_counts(gold: &[Features], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&eps| gold.iter().map(|f| cluster_facts(f, eps).n_clusters as f64).sum::<f64>() / gold.len() as f64)
        .collect()
}

fn max_within_set_distance(gold: &[Features]) -> f64 {
    let mut m: f64 = 0.0;
    for f in gold {
        for i in 0..f.len() {
            for j in i + 1..f.len() {
                m = m.max(f.distance(i, f, j));
            }
        }
    }
    m
}

/// Candidate grid: multiples of 0.05 up to 1 for edit distance; multiples of
/// 5% of the largest observed gold distance for embeddings.
pub fn threshold_grid(gold: &[Features], geometry: Geometry) -> Vec<f64> {
    // k / 20 rather than k * 0.05 keeps grid points like 0.7 exact.
    let scale = match geometry {
        Geometry::Edit => 1.0,
        Geometry::Embedding => max_within_set_distance(gold),
    };
    (1..=GRID).map(|k| scale * k as f64 / GRID as f64).collect()
}

/// The contiguous part of the grid over which the mean gold cluster count
/// falls from near its maximum (≥ 90%) to near its minimum (≤ 110%).
/// Degenerate data yield a single threshold.
pub fn auto_threshold_range(gold: &[Features], geometry: Geometry) -> Vec<f64> {
    let gold: Vec<Features> = gold.iter().filter(|f| !f.is_empty()).cloned().collect();
    if gold.is_empty() {
        return vec![THRESHOLD_STEP];
    }
    let grid = threshold_grid(&gold, geometry);
    if grid[0] <= 0.0 {
        return vec![THRESHOLD_STEP];
    }
    let counts = mean_counts(&gold, &grid);
    let max = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = counts.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min < 1e-12 {
        return vec![grid[0]];
    }
    let start = counts.iter().rposition(|&c| c >= 0.9 * max).unwrap_or(0);
    let end = counts.iter().position(|&c| c <= 1.1 * min).unwrap_or(grid.len() - 1);
    let (lo, hi) = if start <= end { (start, end) } else { (end, start) };
    grid[lo..=hi].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_facts_give_one_threshold() {
        let f = Features::Words(vec![vec!["a".into(), "b".into()]; 4]);
        assert_eq!(auto_threshold_range(&[f.clone(), f], Geometry::Edit).len(), 1);
    }

    #[test]
    fn edit_grid_steps() {
        let f = Features::Words(vec![
            "a b c d".split(' ').map(String::from).collect(),
            "a b c e".split(' ').map(String::from).collect(),
            "a x y e".split(' ').map(String::from).collect(),
            "q r s t".split(' ').map(String::from).collect(),
        ]);
        let r = auto_threshold_range(&[f], Geometry::Edit);
        assert!(!r.is_empty());
        for w in r.windows(2) {
            assert!(w[1] > w[0]);
            assert!((w[1] - w[0] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn three_blobs_straddle_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let mut sets = Vec::new();
        for _ in 0..5 {
            let mut pts = Vec::new();
            for c in centers {
                for _ in 0..4 {
                    pts.push(vec![c[0] + rng.gen_range(-0.5..0.5), c[1] + rng.gen_range(-0.5..0.5)]);
                }
            }
            sets.push(Features::Vectors(pts));
        }
        let r = auto_threshold_range(&sets, Geometry::Embedding);
        // Blob radius is about 1, separation 10: the range must cover the
        // plateau between them.
        assert!(r[0] < 10.0 && *r.last().unwrap() >= 1.0, "{r:?}");
    }
}
