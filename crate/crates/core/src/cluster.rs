//! Grouping patients and scoring partitions against known cohorts.
//!
//! Clustering is plain Lloyd k-means with k-means++ seeding, either on
//! explicit feature vectors or on the rows of a similarity matrix. The
//! external quality metrics compare a predicted partition with cohort
//! labels: Rand index, purity, normalized mutual information, and the
//! pairwise precision/recall/F family.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::similarity::SimilarityMatrix;
use crate::Real;

#[derive(Debug, Clone)]
pub struct KMeansResult<F: Scalar = Real> {
    pub assignment: Vec<usize>,
    /// k x dim centroid matrix.
    pub centroids: Array2<F>,
    pub iterations: usize,
    /// Sum of squared distances to assigned centroids.
    pub inertia: F,
}

fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let diff = x - y;
            diff * diff
        })
        .sum()
}

/// k-means++ seeding: spread the initial centroids out proportionally
/// to squared distance from those already chosen.
fn seed_centroids<F: Scalar>(
    points: &Array2<F>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    let (p, dim) = (points.nrows(), points.ncols());
    let mut centroids = Array2::zeros((k, dim));
    let first = rng.gen_range(0..p);
    centroids.row_mut(0).assign(&points.row(first));

    let mut best_d2: Vec<f64> = (0..p)
        .map(|i| {
            squared_distance(
                points.row(i).as_slice().unwrap(),
                centroids.row(0).as_slice().unwrap(),
            )
            .as_f64()
        })
        .collect();

    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total <= 0.0 {
            // all remaining points coincide with a centroid
            rng.gen_range(0..p)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = p - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for i in 0..p {
            let d2 = squared_distance(
                points.row(i).as_slice().unwrap(),
                centroids.row(c).as_slice().unwrap(),
            )
            .as_f64();
            if d2 < best_d2[i] {
                best_d2[i] = d2;
            }
        }
    }
    centroids
}

/// Nearest centroid by squared distance, ties broken by lowest index.
fn nearest<F: Scalar>(point: &[F], centroids: &Array2<F>) -> usize {
    let mut best = 0;
    let mut best_d = squared_distance(point, centroids.row(0).as_slice().unwrap());
    for c in 1..centroids.nrows() {
        let d = squared_distance(point, centroids.row(c).as_slice().unwrap());
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn lloyd<F: Scalar>(
    points: &Array2<F>,
    mut centroids: Array2<F>,
    pinned: Option<&[Option<usize>]>,
    max_iters: usize,
) -> KMeansResult<F> {
    let (p, dim) = (points.nrows(), points.ncols());
    let k = centroids.nrows();
    let mut assignment: Vec<usize> = vec![0; p];
    let mut iterations = 0;

    let assign_point = |i: usize, centroids: &Array2<F>| -> usize {
        if let Some(labels) = pinned {
            if let Some(cluster) = labels[i] {
                return cluster;
            }
        }
        nearest(points.row(i).as_slice().unwrap(), centroids)
    };

    for i in 0..p {
        assignment[i] = assign_point(i, &centroids);
    }

    for iter in 0..max_iters {
        iterations = iter + 1;
        // recompute means; empty clusters keep their previous centroid
        let mut sums = Array2::<F>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &cluster) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(cluster);
            row += &points.row(i);
            counts[cluster] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let scale = F::one() / F::of(counts[c] as f64);
                centroids
                    .row_mut(c)
                    .assign(&sums.row(c).mapv(|x| x * scale));
            }
        }

        let mut changed = false;
        for i in 0..p {
            let next = assign_point(i, &centroids);
            if next != assignment[i] {
                assignment[i] = next;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let inertia = (0..p)
        .map(|i| {
            squared_distance(
                points.row(i).as_slice().unwrap(),
                centroids.row(assignment[i]).as_slice().unwrap(),
            )
        })
        .sum();

    KMeansResult {
        assignment,
        centroids,
        iterations,
        inertia,
    }
}

/// Lloyd k-means over row vectors, deterministic for a given seed.
pub fn kmeans<F: Scalar>(
    points: &Array2<F>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult<F>> {
    if points.nrows() == 0 {
        return Err(Error::InvalidInput("no points to cluster".into()));
    }
    if k == 0 || k > points.nrows() {
        return Err(Error::InvalidInput(format!(
            "k = {k} out of range for {} points",
            points.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids = seed_centroids(points, k, &mut rng);
    Ok(lloyd(points, centroids, None, max_iters))
}

/// Clusters patients using their similarity-matrix rows as features.
pub fn kmeans_from_similarity<F: Scalar>(
    sim: &SimilarityMatrix<F>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KMeansResult<F>> {
    kmeans(&sim.scores, k, seed, max_iters)
}

/// k-means with a labeled subset: initial centroids are the labeled
/// group means and labeled points never move. Every cluster needs at
/// least one labeled point, which also makes seeding deterministic.
pub fn seeded_kmeans<F: Scalar>(
    points: &Array2<F>,
    k: usize,
    labels: &[Option<usize>],
    max_iters: usize,
) -> Result<KMeansResult<F>> {
    if points.nrows() == 0 {
        return Err(Error::InvalidInput("no points to cluster".into()));
    }
    if labels.len() != points.nrows() {
        return Err(Error::InvalidInput(
            "one (optional) label per point required".into(),
        ));
    }
    let dim = points.ncols();
    let mut sums = Array2::<F>::zeros((k, dim));
    let mut counts = vec![0usize; k];
    for (i, label) in labels.iter().enumerate() {
        if let Some(cluster) = label {
            if *cluster >= k {
                return Err(Error::InvalidInput(format!(
                    "label {cluster} out of range for k = {k}"
                )));
            }
            let mut row = sums.row_mut(*cluster);
            row += &points.row(i);
            counts[*cluster] += 1;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::InvalidInput(format!(
            "seeded k-means needs at least one labeled point in each of the {k} clusters"
        )));
    }
    let mut centroids = Array2::zeros((k, dim));
    for c in 0..k {
        let scale = F::one() / F::of(counts[c] as f64);
        centroids.row_mut(c).assign(&sums.row(c).mapv(|x| x * scale));
    }
    Ok(lloyd(points, centroids, Some(labels), max_iters))
}

/// A predicted clustering and the reference cohorts over one patient
/// set, both as dense ids aligned by position.
#[derive(Debug, Clone)]
pub struct PartitionPair {
    clusters: Vec<usize>,
    cohorts: Vec<usize>,
}

impl PartitionPair {
    pub fn new(clusters: Vec<usize>, cohorts: Vec<usize>) -> Result<Self> {
        if clusters.len() != cohorts.len() {
            return Err(Error::InvalidInput(format!(
                "partition sizes differ: {} clusters vs {} cohorts",
                clusters.len(),
                cohorts.len()
            )));
        }
        Ok(PartitionPair { clusters, cohorts })
    }

    /// Builds the pair from arbitrary label types, densifying ids in
    /// first-appearance order.
    pub fn from_labels<A, B>(clusters: &[A], cohorts: &[B]) -> Result<Self>
    where
        A: Eq + std::hash::Hash,
        B: Eq + std::hash::Hash,
    {
        fn densify<T: Eq + std::hash::Hash>(labels: &[T]) -> Vec<usize> {
            let mut ids: HashMap<&T, usize> = HashMap::new();
            labels
                .iter()
                .map(|l| {
                    let next = ids.len();
                    *ids.entry(l).or_insert(next)
                })
                .collect()
        }
        PartitionPair::new(densify(clusters), densify(cohorts))
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    fn contingency(&self) -> (Vec<Vec<u64>>, Vec<u64>, Vec<u64>) {
        let n_clusters = self.clusters.iter().max().map_or(0, |m| m + 1);
        let n_cohorts = self.cohorts.iter().max().map_or(0, |m| m + 1);
        let mut table = vec![vec![0u64; n_cohorts]; n_clusters];
        for (&i, &j) in self.clusters.iter().zip(&self.cohorts) {
            table[i][j] += 1;
        }
        let cluster_sizes = table.iter().map(|row| row.iter().sum()).collect();
        let cohort_sizes = (0..n_cohorts)
            .map(|j| table.iter().map(|row| row[j]).sum())
            .collect();
        (table, cluster_sizes, cohort_sizes)
    }
}

/// Pairwise agreement counts over all C(n, 2) patient pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyCounts {
    /// Same cohort, same cluster.
    pub true_positives: u64,
    /// Different cohort, different cluster.
    pub true_negatives: u64,
    /// Different cohort, same cluster.
    pub false_positives: u64,
    /// Same cohort, different cluster.
    pub false_negatives: u64,
}

fn choose2(x: u64) -> u64 {
    x * x.saturating_sub(1) / 2
}

impl ContingencyCounts {
    pub fn from_partition(partition: &PartitionPair) -> Self {
        let (table, cluster_sizes, cohort_sizes) = partition.contingency();
        let n = partition.len() as u64;
        let tp: u64 = table.iter().flatten().map(|&c| choose2(c)).sum();
        let same_cluster: u64 = cluster_sizes.iter().map(|&c| choose2(c)).sum();
        let same_cohort: u64 = cohort_sizes.iter().map(|&c| choose2(c)).sum();
        let total = choose2(n);
        let fp = same_cluster - tp;
        let fn_ = same_cohort - tp;
        ContingencyCounts {
            true_positives: tp,
            true_negatives: total - tp - fp - fn_,
            false_positives: fp,
            false_negatives: fn_,
        }
    }

    pub fn total_pairs(&self) -> u64 {
        self.true_positives + self.true_negatives + self.false_positives + self.false_negatives
    }
}

/// Fraction of patient pairs on which clustering and cohorts agree.
/// Requires at least two patients.
pub fn rand_index(partition: &PartitionPair) -> f64 {
    assert!(partition.len() >= 2, "rand index needs at least two patients");
    let counts = ContingencyCounts::from_partition(partition);
    (counts.true_positives + counts.true_negatives) as f64 / counts.total_pairs() as f64
}

/// Mean dominant-cohort fraction over clusters; 1 iff every cluster is
/// cohort-pure.
pub fn purity(partition: &PartitionPair) -> f64 {
    assert!(!partition.is_empty(), "purity needs at least one patient");
    let (table, _, _) = partition.contingency();
    let dominant: u64 = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    dominant as f64 / partition.len() as f64
}

/// Mutual information between the two partitions normalized by the mean
/// of their entropies (natural log; 0 log 0 reads as 0). Identical
/// partitions give 1, a single all-patient cluster gives 0.
pub fn nmi(partition: &PartitionPair) -> f64 {
    assert!(!partition.is_empty(), "nmi needs at least one patient");
    let (table, cluster_sizes, cohort_sizes) = partition.contingency();
    let n = partition.len() as f64;

    let entropy = |sizes: &[u64]| -> f64 {
        -sizes
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / n;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let h_clusters = entropy(&cluster_sizes);
    let h_cohorts = entropy(&cohort_sizes);

    let mut information = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            if count > 0 {
                let pxy = count as f64 / n;
                let px = cluster_sizes[i] as f64 / n;
                let py = cohort_sizes[j] as f64 / n;
                information += pxy * (pxy / (px * py)).ln();
            }
        }
    }

    let denom = (h_clusters + h_cohorts) / 2.0;
    if denom == 0.0 {
        return 0.0;
    }
    (information / denom).max(0.0)
}

/// Pairwise precision, recall and F-measure. Degenerate denominators
/// yield 0 rather than an error.
pub fn precision_recall_f(counts: &ContingencyCounts) -> (f64, f64, f64) {
    let tp = counts.true_positives as f64;
    let predicted = counts.true_positives + counts.false_positives;
    let actual = counts.true_positives + counts.false_negatives;
    if predicted == 0 || actual == 0 || counts.true_positives == 0 {
        return (0.0, 0.0, 0.0);
    }
    let precision = tp / predicted as f64;
    let recall = tp / actual as f64;
    let f = 2.0 * precision * recall / (precision + recall);
    (precision, recall, f)
}

/// Metric bundle reported by the evaluation stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub rand_index: f64,
    pub purity: f64,
    pub nmi: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub k: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_partition(partition: &PartitionPair, k: usize, seed: u64) -> Self {
        let counts = ContingencyCounts::from_partition(partition);
        let (precision, recall, f_measure) = precision_recall_f(&counts);
        EvalReport {
            rand_index: rand_index(partition),
            purity: purity(partition),
            nmi: nmi(partition),
            precision,
            recall,
            f_measure,
            k,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn pair(clusters: &[usize], cohorts: &[usize]) -> PartitionPair {
        PartitionPair::new(clusters.to_vec(), cohorts.to_vec()).unwrap()
    }

    // O(n^2) pair enumeration, the slow mirror of the count formulas.
    fn rand_index_oracle(clusters: &[usize], cohorts: &[usize]) -> f64 {
        let n = clusters.len();
        let mut agree = 0u64;
        let mut total = 0u64;
        for i in 0..n {
            for j in (i + 1)..n {
                let same_cluster = clusters[i] == clusters[j];
                let same_cohort = cohorts[i] == cohorts[j];
                agree += (same_cluster == same_cohort) as u64;
                total += 1;
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn rand_index_perfect_match_is_one() {
        let p = pair(&[0, 0, 1, 1], &[1, 1, 0, 0]);
        assert_eq!(rand_index(&p), 1.0);
    }

    #[test]
    fn rand_index_hand_example() {
        // clusters {ab|cd}, cohorts {ac|bd}: TP=0, TN=2 of 6 pairs
        let p = pair(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        let counts = ContingencyCounts::from_partition(&p);
        assert_eq!(counts.true_positives, 0);
        assert_eq!(counts.true_negatives, 2);
        assert_eq!(counts.false_positives, 2);
        assert_eq!(counts.false_negatives, 2);
        assert!((rand_index(&p) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn rand_index_single_cluster_distinct_cohorts_is_zero() {
        let p = pair(&[0, 0, 0], &[0, 1, 2]);
        assert_eq!(rand_index(&p), 0.0);
    }

    #[test]
    fn purity_singletons_and_perfect_match() {
        let p = pair(&[0, 1, 2], &[2, 0, 1]);
        assert_eq!(purity(&p), 1.0);
        let p = pair(&[0, 0, 1, 1], &[0, 0, 1, 1]);
        assert_eq!(purity(&p), 1.0);
    }

    #[test]
    fn purity_hand_example_dominant_four_of_six() {
        let p = pair(&[0; 6], &[0, 0, 0, 0, 1, 1]);
        assert!((purity(&p) - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nmi_identical_partitions_is_one() {
        let p = pair(&[0, 0, 1, 1, 2], &[1, 1, 2, 2, 0]);
        assert!((nmi(&p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_single_cluster_is_zero() {
        let p = pair(&[0, 0, 0, 0], &[0, 1, 0, 1]);
        assert_eq!(nmi(&p), 0.0);
    }

    #[test]
    fn nmi_independent_partitions_is_zero() {
        // joint table has all four cells at 1/4: independent
        let p = pair(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(nmi(&p).abs() < 1e-12);
    }

    #[test]
    fn precision_recall_f_cases() {
        let perfect = ContingencyCounts {
            true_positives: 10,
            true_negatives: 20,
            false_positives: 0,
            false_negatives: 0,
        };
        assert_eq!(precision_recall_f(&perfect), (1.0, 1.0, 1.0));

        let mixed = ContingencyCounts {
            true_positives: 2,
            true_negatives: 0,
            false_positives: 2,
            false_negatives: 0,
        };
        let (p, r, f) = precision_recall_f(&mixed);
        assert!((p - 0.5).abs() < 1e-15);
        assert_eq!(r, 1.0);
        assert!((f - 2.0 / 3.0).abs() < 1e-15);

        let degenerate = ContingencyCounts {
            true_positives: 0,
            true_negatives: 5,
            false_positives: 1,
            false_negatives: 1,
        };
        assert_eq!(precision_recall_f(&degenerate), (0.0, 0.0, 0.0));
    }

    #[test]
    fn kmeans_k_equals_p_gives_singletons() {
        let points: Array2<f64> = array![[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]];
        let result = kmeans(&points, 4, 1, 50).unwrap();
        let mut seen: Vec<usize> = result.assignment.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert!(result.inertia < 1e-12);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let points: Array2<f64> = array![
            [0.0, 0.1],
            [0.1, 0.0],
            [10.0, 10.1],
            [10.1, 10.0],
        ];
        let result = kmeans(&points, 2, 3, 50).unwrap();
        assert_eq!(result.assignment[0], result.assignment[1]);
        assert_eq!(result.assignment[2], result.assignment[3]);
        assert_ne!(result.assignment[0], result.assignment[2]);
    }

    #[test]
    fn kmeans_k_one_centroid_is_mean() {
        let points: Array2<f64> = array![[1.0, 0.0], [3.0, 2.0], [5.0, 4.0]];
        let result = kmeans(&points, 1, 9, 50).unwrap();
        assert!(result.assignment.iter().all(|&c| c == 0));
        assert!((result.centroids[(0, 0)] - 3.0).abs() < 1e-12);
        assert!((result.centroids[(0, 1)] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_rejects_bad_k_and_empty_input() {
        let points: Array2<f64> = array![[1.0], [2.0]];
        assert!(kmeans(&points, 3, 0, 10).is_err());
        assert!(kmeans(&points, 0, 0, 10).is_err());
        assert!(kmeans(&Array2::<f64>::zeros((0, 2)), 1, 0, 10).is_err());
    }

    #[test]
    fn kmeans_is_deterministic_for_a_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let points = Array2::from_shape_fn((40, 5), |_| rng.gen_range(-1.0..1.0));
        let a = kmeans(&points, 4, 7, 100).unwrap();
        let b = kmeans(&points, 4, 7, 100).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn similarity_rows_recover_perfect_blocks() {
        // two perfect blocks in the similarity matrix
        let scores: Array2<f64> = array![
            [1.0, 1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0, 1.0],
        ];
        let sim = SimilarityMatrix {
            ids: (0..4).map(|i| format!("p{i}")).collect(),
            scores,
            measure: crate::similarity::Measure::Rv,
            undefined_pairs: 0,
        };
        let result = kmeans_from_similarity(&sim, 2, 5, 50).unwrap();
        assert_eq!(result.assignment[0], result.assignment[1]);
        assert_eq!(result.assignment[2], result.assignment[3]);
        assert_ne!(result.assignment[0], result.assignment[2]);

        // identity similarity with k = P: every patient its own cluster
        let sim: SimilarityMatrix<f64> = SimilarityMatrix {
            ids: (0..3).map(|i| format!("p{i}")).collect(),
            scores: Array2::eye(3),
            measure: crate::similarity::Measure::Rv,
            undefined_pairs: 0,
        };
        let result = kmeans_from_similarity(&sim, 3, 5, 50).unwrap();
        let mut seen = result.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn seeded_kmeans_all_labeled_returns_labels() {
        let points: Array2<f64> = array![[0.0], [0.1], [9.0], [9.1]];
        let labels = vec![Some(0), Some(0), Some(1), Some(1)];
        let result = seeded_kmeans(&points, 2, &labels, 50).unwrap();
        assert_eq!(result.assignment, vec![0, 0, 1, 1]);
    }

    #[test]
    fn seeded_kmeans_half_labeled_recovers_blobs() {
        let points: Array2<f64> = array![
            [0.0, 0.0],
            [0.2, 0.1],
            [0.1, 0.2],
            [8.0, 8.0],
            [8.2, 8.1],
            [8.1, 8.2],
        ];
        let labels = vec![Some(0), None, None, Some(1), None, None];
        let result = seeded_kmeans(&points, 2, &labels, 50).unwrap();
        assert_eq!(result.assignment, vec![0, 0, 0, 1, 1, 1]);
        // direct nearest-centroid check on the unlabeled points
        for i in [1, 2, 4, 5] {
            let d0 = squared_distance(
                points.row(i).as_slice().unwrap(),
                result.centroids.row(0).as_slice().unwrap(),
            );
            let d1 = squared_distance(
                points.row(i).as_slice().unwrap(),
                result.centroids.row(1).as_slice().unwrap(),
            );
            let expected = if d0 < d1 { 0 } else { 1 };
            assert_eq!(result.assignment[i], expected);
        }
    }

    #[test]
    fn seeded_kmeans_requires_every_cluster_labeled() {
        let points: Array2<f64> = array![[0.0], [1.0], [2.0]];
        let labels = vec![Some(0), None, None];
        assert!(seeded_kmeans(&points, 2, &labels, 50).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let points: Array2<f32> = array![[0.0, 0.0], [4.0, 4.0]];
        let result = kmeans(&points, 2, 0, 10).unwrap();
        assert_ne!(result.assignment[0], result.assignment[1]);
    }

    fn arb_partition() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0usize..5, n),
                prop::collection::vec(0usize..5, n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_relabeling((clusters, cohorts) in arb_partition()) {
            let p = pair(&clusters, &cohorts);
            // permute cluster ids with a fixed derangement-ish map
            let relabeled: Vec<usize> = clusters.iter().map(|&c| (c + 3) % 5).collect();
            let q = pair(&relabeled, &cohorts);
            prop_assert!((rand_index(&p) - rand_index(&q)).abs() < 1e-15);
            prop_assert!((purity(&p) - purity(&q)).abs() < 1e-15);
            prop_assert!((nmi(&p) - nmi(&q)).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_unit_interval((clusters, cohorts) in arb_partition()) {
            let p = pair(&clusters, &cohorts);
            for value in [rand_index(&p), purity(&p), nmi(&p)] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&value), "{value}");
            }
        }

        #[test]
        fn rand_index_matches_pair_enumeration((clusters, cohorts) in arb_partition()) {
            let p = pair(&clusters, &cohorts);
            let fast = rand_index(&p);
            let slow = rand_index_oracle(&clusters, &cohorts);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn purity_never_decreases_when_splitting((clusters, cohorts) in arb_partition(), split_mask in prop::collection::vec(prop::bool::ANY, 40)) {
            let before = purity(&pair(&clusters, &cohorts));
            // split cluster 0 into two by the mask
            let split: Vec<usize> = clusters
                .iter()
                .enumerate()
                .map(|(i, &c)| if c == 0 && split_mask[i % split_mask.len()] { 5 } else { c })
                .collect();
            let after = purity(&pair(&split, &cohorts));
            prop_assert!(after >= before - 1e-15);
        }
    }
}
