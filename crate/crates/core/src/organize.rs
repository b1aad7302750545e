//! Result organization: category grouping, subgroup clustering, scatter data.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::RankedResult;
use crate::store::Corpus;

pub const DEFAULT_SUBGROUPS: usize = 3;
const KMEANS_MAX_ITERATIONS: usize = 100;
const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGroup {
    pub category: String,
    pub results: Vec<RankedResult>,
}

/// Partitions ranked results by diagnosis. Groups are ordered by their best
/// (first) member; within a group the input order is kept.
pub fn group_by_category(
    results: &[RankedResult],
    allowed: Option<&BTreeSet<String>>,
) -> Vec<CategoryGroup> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<RankedResult>> = BTreeMap::new();
    for r in results {
        if allowed.is_some_and(|a| !a.contains(&r.diagnosis)) {
            continue;
        }
        let slot = groups.entry(r.diagnosis.as_str()).or_default();
        if slot.is_empty() {
            order.push(r.diagnosis.clone());
        }
        slot.push(r.clone());
    }
    order
        .into_iter()
        .map(|category| {
            let results = groups.remove(category.as_str()).unwrap_or_default();
            CategoryGroup { category, results }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub cluster: usize,
    pub member_ids: Vec<String>,
    pub centroid: Vec<f64>,
}

/// Outcome of a k-means run over a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to assigned centroids after seeding and after each iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn objective(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a centroid
            Err(_) => {
                let free: Vec<usize> = (0..points.len()).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(&centroids, p).0).collect();
    let mut history = vec![objective(points, &centroids, &assignments)];
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;

        // Repair empty clusters by moving in the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| {
                    sq_dist(points[a], &centroids[assignments[a]])
                        .total_cmp(&sq_dist(points[b], &centroids[assignments[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = j;
                counts[j] = 1;
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (j, sum) in sums.into_iter().enumerate() {
            let n = counts[j] as f64;
            let updated: Vec<f64> = sum.into_iter().map(|s| s / n).collect();
            shift = shift.max(sq_dist(&updated, &centroids[j]).sqrt());
            centroids[j] = updated;
        }

        for (a, p) in assignments.iter_mut().zip(points) {
            let (j, d) = nearest(&centroids, p);
            // only move on strict improvement so the objective cannot rise on ties
            if d < sq_dist(p, &centroids[*a]) {
                *a = j;
            }
        }
        history.push(objective(points, &centroids, &assignments));

        let mut occupied = vec![false; k];
        assignments.iter().for_each(|&a| occupied[a] = true);
        if shift < KMEANS_TOLERANCE && occupied.iter().all(|&o| o) {
            break;
        }
    }

    // Centroids reported as the means of the final assignment.
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(&assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (j, sum) in sums.into_iter().enumerate() {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            centroids[j] = sum.into_iter().map(|s| s / n).collect();
        }
    }

    Ok(KMeansFit {
        centroids,
        assignments,
        objective_history: history,
        iterations,
    })
}

/// Clusters the embeddings of `member_ids` into `k` subgroups.
pub fn cluster_subgroups<S: AsRef<str>>(
    corpus: &Corpus,
    member_ids: &[S],
    k: usize,
    seed: u64,
) -> Result<Vec<Subgroup>> {
    if k > member_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} subgroups from {} members",
            member_ids.len()
        )));
    }
    let records = member_ids
        .iter()
        .map(|id| corpus.get_record(id.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let points: Vec<&[f64]> = records.iter().map(|r| r.embedding.as_slice()).collect();
    let fit = kmeans(&points, k, seed)?;
    let mut groups: Vec<Subgroup> = fit
        .centroids
        .into_iter()
        .enumerate()
        .map(|(cluster, centroid)| Subgroup {
            cluster,
            member_ids: Vec::new(),
            centroid,
        })
        .collect();
    for (rec, &a) in records.iter().zip(&fit.assignments) {
        groups[a].member_ids.push(rec.id.clone());
    }
    Ok(groups)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_id: String,
    pub distance: f64,
    pub diagnosis: String,
}

/// Distance from `query` to each result, for the refinement scatterplot.
pub fn scatter_data(
    corpus: &Corpus,
    query: &[f64],
    results: &[RankedResult],
) -> Result<Vec<ScatterPoint>> {
    let metric = corpus.metric();
    results
        .iter()
        .map(|r| {
            let rec = corpus.get_record(&r.image_id)?;
            Ok(ScatterPoint {
                image_id: rec.id.clone(),
                distance: metric.distance(query, &rec.embedding)?,
                diagnosis: rec.diagnosis.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(id: &str, d: f64, cat: &str) -> RankedResult {
        RankedResult {
            image_id: id.into(),
            distance: d,
            diagnosis: cat.into(),
        }
    }

    #[test]
    fn single_category_is_identity() {
        let rs = vec![r("a", 0.1, "g1"), r("b", 0.2, "g1")];
        let g = group_by_category(&rs, None);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].results, rs);
    }

    #[test]
    fn empty_allowed_set() {
        let rs = vec![r("a", 0.1, "g1")];
        assert!(group_by_category(&rs, Some(&BTreeSet::new())).is_empty());
    }

    #[test]
    fn groups_ordered_by_best_member() {
        let rs = vec![
            r("a", 0.1, "g2"),
            r("b", 0.2, "g1"),
            r("c", 0.3, "g2"),
            r("d", 0.4, "g3"),
        ];
        let allowed: BTreeSet<String> = ["g1", "g2"].map(String::from).into();
        let g = group_by_category(&rs, Some(&allowed));
        let cats: Vec<_> = g.iter().map(|g| g.category.as_str()).collect();
        assert_eq!(cats, ["g2", "g1"]);
        assert_eq!(g[0].results.len(), 2);
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 3.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fit = kmeans(&refs, 1, 7).unwrap();
        assert_eq!(fit.assignments, vec![0, 0, 0]);
        assert!((fit.centroids[0][0] - 1.0).abs() < 1e-15);
        assert!((fit.centroids[0][1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kmeans_singletons() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fit = kmeans(&refs, 5, 3).unwrap();
        let mut a = fit.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 5);
        assert_eq!(*fit.objective_history.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_duplicates_do_not_panic() {
        let pts: Vec<Vec<f64>> = vec![vec![1.0]; 4];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let fit = kmeans(&refs, 3, 0).unwrap();
        assert_eq!(fit.assignments.len(), 4);
        assert_eq!(*fit.objective_history.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts: Vec<Vec<f64>> = vec![vec![1.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        assert!(kmeans(&refs, 2, 0).is_err());
        assert!(kmeans(&refs, 0, 0).is_err());
    }
}
