use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{scoped_rng, Seed};
use crate::error::{Error, Result};
use crate::linalg::{rows, sq_dist};

pub const MAX_ITER: usize = 300;
pub const TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: Seed, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let points = rows(x);
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} for {n} rows")));
    }
    let mut rng = scoped_rng(seed, "kmeans")?;

    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            // guard against rounding landing on an already chosen point
            if d2[chosen] == 0.0 {
                chosen = (0..n).rev().find(|i| d2[*i] > 0.0).expect("total is positive");
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
    }

    let dim = x.ncols();
    let mut assignments = vec![0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignments[i] = c;
            inertia += d;
        }
        history.push(inertia);
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, c) in points.iter().zip(&assignments) {
            counts[*c] += 1;
            for (s, v) in sums[*c].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, n), old)| {
                if *n == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / *n as f64).collect()
                }
            })
            .collect();
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|a, b| {
                        let da = sq_dist(&points[*a], &next[assignments[*a]]);
                        let db = sq_dist(&points[*b], &next[assignments[*b]]);
                        da.total_cmp(&db).then(b.cmp(a))
                    })
                    .expect("n > 0");
                next[c] = points[far].clone();
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            let mut inertia = 0.0;
            for (i, p) in points.iter().enumerate() {
                let (c, d) = nearest(p, &centroids);
                assignments[i] = c;
                inertia += d;
            }
            history.push(inertia);
            break;
        }
    }
    let inertia = *history.last().expect("at least one assignment");
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Fraction of points whose cluster's majority class is their own class.
pub fn purity(assignments: &[usize], labels: &[String]) -> f64 {
    if assignments.is_empty() {
        return 0.0;
    }
    let table = contingency(assignments, labels);
    let hits: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / assignments.len() as f64
}

/// cluster → class → count.
pub fn contingency(assignments: &[usize], labels: &[String]) -> BTreeMap<usize, BTreeMap<String, usize>> {
    let mut table: BTreeMap<usize, BTreeMap<String, usize>> = BTreeMap::new();
    for (c, l) in assignments.iter().zip(labels) {
        *table.entry(*c).or_default().entry(l.clone()).or_default() += 1;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 1.0, 10.0, 10.0, 10.0, 11.0])
    }

    #[test]
    fn toy_example() {
        for s in 0..20 {
            let r = kmeans(&toy(), 2, Seed(s), MAX_ITER, TOL).unwrap();
            let mut c = r.centroids.clone();
            c.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 10.5]], "seed {s}");
            assert_eq!(r.inertia, 1.0);
        }
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let r = kmeans(&toy(), 4, Seed(1), MAX_ITER, TOL).unwrap();
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn k_too_large() {
        assert!(kmeans(&toy(), 5, Seed(1), MAX_ITER, TOL).is_err());
    }

    #[test]
    fn purity_single_class() {
        let labels = vec!["a".to_string(); 4];
        assert_eq!(purity(&[0, 1, 1, 0], &labels), 1.0);
        let mixed: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        assert_eq!(purity(&[0, 0, 0, 0], &mixed), 0.5);
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let x = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 2.0]);
        let r = kmeans(&x, 3, Seed(9), MAX_ITER, TOL).unwrap();
        assert_eq!(r.centroids.len(), 3);
        assert!(r.inertia < 1e-12);
    }
}
