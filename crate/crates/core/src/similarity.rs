//! Unsupervised pairwise scoring of temporal patient matrices.
//!
//! Two patients' matrices share the embedding dimension d but not the
//! visit count, so both measures reduce each matrix to d-indexed
//! structure first: the RV coefficient compares the d x d gram matrices
//! of the visit profiles, and distance correlation treats the d
//! dimension rows as samples, each living in the patient's own visit
//! space.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::represent::PatientMatrix;
use crate::Real;

/// Gram matrix X Xᵀ of a patient matrix: d x d, symmetric, PSD.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<F: Scalar = Real>(pub Array2<F>);

impl<F: Scalar> GramMatrix<F> {
    pub fn of(matrix: &PatientMatrix<F>) -> Self {
        let d = matrix.dim();
        let mut gram = Array2::zeros((d, d));
        // fill the upper triangle once, mirror for exact symmetry
        for i in 0..d {
            for j in i..d {
                let value = matrix.data.row(i).dot(&matrix.data.row(j));
                gram[(i, j)] = value;
                gram[(j, i)] = value;
            }
        }
        GramMatrix(gram)
    }

    fn frobenius_inner(&self, other: &GramMatrix<F>) -> F {
        self.0.iter().zip(other.0.iter()).map(|(&a, &b)| a * b).sum()
    }
}

/// Pairwise Euclidean distances between rows, double-centered so all
/// row and column means vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredDistanceMatrix<F: Scalar = Real> {
    pub values: Array2<F>,
}

/// Which pairwise score fills a [`SimilarityMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Rv,
    Dcor,
    Cnn,
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Measure::Rv => "rv",
            Measure::Dcor => "dcor",
            Measure::Cnn => "cnn",
        };
        f.write_str(s)
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rv" => Ok(Measure::Rv),
            "dcor" => Ok(Measure::Dcor),
            "cnn" => Ok(Measure::Cnn),
            _ => Err(Error::InvalidInput(format!("unknown measure `{s}`"))),
        }
    }
}

/// Symmetric all-pairs score matrix with unit diagonal.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<F: Scalar = Real> {
    pub ids: Vec<String>,
    pub scores: Array2<F>,
    pub measure: Measure,
    /// Pairs whose score was undefined and recorded as 0.
    pub undefined_pairs: usize,
}

impl<F: Scalar> SimilarityMatrix<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Linear similarity of two configurations:
/// `tr(Sx Sy) / sqrt(tr(Sx^2) tr(Sy^2))` over the d x d gram matrices.
/// 1 for identical configurations, 0 for orthogonal ones.
pub fn rv_coefficient<F: Scalar>(x: &PatientMatrix<F>, y: &PatientMatrix<F>) -> Result<F> {
    if x.dim() != y.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let (gx, gy) = (GramMatrix::of(x), GramMatrix::of(y));
    let xx = gx.frobenius_inner(&gx);
    let yy = gy.frobenius_inner(&gy);
    if xx == F::zero() || yy == F::zero() {
        return Err(Error::UndefinedSimilarity(format!(
            "zero matrix for `{}` or `{}`",
            x.patient_id, y.patient_id
        )));
    }
    Ok(gx.frobenius_inner(&gy) / (xx * yy).sqrt())
}

/// Double-centers the pairwise Euclidean distance matrix of the rows of
/// `points` (n samples of equal length).
pub fn center_distance_matrix<F: Scalar>(points: &Array2<F>) -> Result<CenteredDistanceMatrix<F>> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(
            "need at least two samples to center distances".into(),
        ));
    }
    let mut distances = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut sum = F::zero();
            for (&a, &b) in points.row(i).iter().zip(points.row(j)) {
                let diff = a - b;
                sum += diff * diff;
            }
            let dist = sum.sqrt();
            distances[(i, j)] = dist;
            distances[(j, i)] = dist;
        }
    }

    let inv_n = F::one() / F::of(n as f64);
    let row_means: Vec<F> = (0..n).map(|i| distances.row(i).sum() * inv_n).collect();
    let col_means: Vec<F> = (0..n).map(|j| distances.column(j).sum() * inv_n).collect();
    let grand_mean = distances.sum() * inv_n * inv_n;

    let mut values = distances;
    for i in 0..n {
        for j in 0..n {
            values[(i, j)] = values[(i, j)] - row_means[i] - col_means[j] + grand_mean;
        }
    }
    Ok(CenteredDistanceMatrix { values })
}

fn centered_rows<F: Scalar>(x: &PatientMatrix<F>) -> Result<CenteredDistanceMatrix<F>> {
    center_distance_matrix(&x.data)
}

/// Squared empirical distance covariance between two patients: the mean
/// elementwise product of their centered distance matrices, the samples
/// being the d embedding-dimension rows.
pub fn distance_covariance<F: Scalar>(x: &PatientMatrix<F>, y: &PatientMatrix<F>) -> Result<F> {
    if x.dim() != y.dim() {
        return Err(Error::InvalidInput(format!(
            "embedding dimensions differ: {} vs {}",
            x.dim(),
            y.dim()
        )));
    }
    let n = x.dim();
    let (a, b) = (centered_rows(x)?, centered_rows(y)?);
    let inner: F = a
        .values
        .iter()
        .zip(b.values.iter())
        .map(|(&p, &q)| p * q)
        .sum();
    Ok(inner / F::of((n * n) as f64))
}

/// Nonlinear dependence score: the square root of
/// `dCov²(X,Y) / sqrt(dCov²(X,X) dCov²(Y,Y))`, in [0, 1].
/// Tiny negative covariances from rounding are clamped to 0.
pub fn distance_correlation<F: Scalar>(x: &PatientMatrix<F>, y: &PatientMatrix<F>) -> Result<F> {
    let xy = distance_covariance(x, y)?;
    let xx = distance_covariance(x, x)?;
    let yy = distance_covariance(y, y)?;
    if xx <= F::zero() || yy <= F::zero() {
        return Err(Error::UndefinedSimilarity(format!(
            "constant rows in `{}` or `{}`",
            x.patient_id, y.patient_id
        )));
    }
    let ratio = xy.max(F::zero()) / (xx * yy).sqrt();
    Ok(ratio.sqrt())
}

/// Scores all pairs with the given function; undefined pairs become 0
/// and are counted. The diagonal is fixed at 1. Pairs are evaluated in
/// parallel; the result does not depend on scheduling.
pub fn build_similarity_matrix_with<F, S>(
    patients: &[PatientMatrix<F>],
    measure: Measure,
    score: S,
) -> SimilarityMatrix<F>
where
    F: Scalar,
    S: Fn(&PatientMatrix<F>, &PatientMatrix<F>) -> Result<F> + Sync,
{
    let p = patients.len();
    let undefined = AtomicUsize::new(0);
    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    let scored: Vec<F> = pairs
        .par_iter()
        .map(|&(i, j)| match score(&patients[i], &patients[j]) {
            Ok(value) => value,
            Err(_) => {
                undefined.fetch_add(1, Ordering::Relaxed);
                F::zero()
            }
        })
        .collect();

    let mut scores = Array2::zeros((p, p));
    for i in 0..p {
        scores[(i, i)] = F::one();
    }
    for (&(i, j), &value) in pairs.iter().zip(&scored) {
        scores[(i, j)] = value;
        scores[(j, i)] = value;
    }
    SimilarityMatrix {
        ids: patients.iter().map(|m| m.patient_id.clone()).collect(),
        scores,
        measure,
        undefined_pairs: undefined.into_inner(),
    }
}

/// All-pairs similarity under an unsupervised measure. The matcher
/// crate-module provides the corresponding builder for the trained one.
pub fn build_similarity_matrix<F: Scalar>(
    patients: &[PatientMatrix<F>],
    measure: Measure,
) -> Result<SimilarityMatrix<F>> {
    match measure {
        Measure::Rv => Ok(build_similarity_matrix_with(patients, measure, rv_coefficient)),
        Measure::Dcor => Ok(build_similarity_matrix_with(patients, measure, distance_correlation)),
        Measure::Cnn => Err(Error::InvalidInput(
            "cnn similarity needs a trained model; use matcher::build_cnn_similarity".into(),
        )),
    }
}

/// CSV export: header `patient_id,<id...>`, then one row per patient.
pub fn write_similarity_csv<F: Scalar>(
    sim: &SimilarityMatrix<F>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    write!(writer, "patient_id")?;
    for id in &sim.ids {
        write!(writer, ",{id}")?;
    }
    writeln!(writer)?;
    for (i, id) in sim.ids.iter().enumerate() {
        write!(writer, "{id}")?;
        for value in sim.scores.row(i) {
            write!(writer, ",{value}")?;
        }
        writeln!(writer)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_similarity_csv<F: Scalar>(
    path: impl AsRef<Path>,
    measure: Measure,
) -> Result<SimilarityMatrix<F>> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty similarity file".into()))?;
    let ids: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let p = ids.len();
    let mut scores = Array2::zeros((p, p));
    let mut row_count = 0usize;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if i >= p {
            return Err(Error::Format("more similarity rows than ids".into()));
        }
        let mut parts = line.split(',');
        let id = parts
            .next()
            .ok_or_else(|| Error::Format(format!("row {i}: missing id")))?;
        if id != ids[i] {
            return Err(Error::Format(format!(
                "row {i}: id `{id}` does not match header `{}`",
                ids[i]
            )));
        }
        let mut count = 0usize;
        for (j, token) in parts.enumerate() {
            let value: f64 = token
                .parse()
                .map_err(|_| Error::Format(format!("row {i}: bad number `{token}`")))?;
            scores[(i, j)] = F::of(value);
            count += 1;
        }
        if count != p {
            return Err(Error::Format(format!(
                "row {i}: expected {p} values, found {count}"
            )));
        }
        row_count += 1;
    }
    if row_count != p {
        return Err(Error::Format(format!(
            "expected {p} similarity rows, found {row_count}"
        )));
    }
    Ok(SimilarityMatrix {
        ids,
        scores,
        measure,
        undefined_pairs: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(id: &str, data: Array2<f64>) -> PatientMatrix<f64> {
        PatientMatrix {
            patient_id: id.to_string(),
            data,
            visit_dates: Vec::new(),
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, d: usize, n: usize) -> PatientMatrix<f64> {
        let data: Vec<f64> = (0..d * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        matrix("r", Array2::from_shape_vec((d, n), data).unwrap())
    }

    // Literal transcriptions of the formulas as nested loops, kept
    // independent of the production code paths.
    mod oracle {
        pub fn rv(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
            let gram = |m: &[Vec<f64>]| {
                let d = m.len();
                let mut g = vec![vec![0.0; d]; d];
                for i in 0..d {
                    for j in 0..d {
                        g[i][j] = m[i].iter().zip(&m[j]).map(|(a, b)| a * b).sum();
                    }
                }
                g
            };
            let product_trace = |a: &[Vec<f64>], b: &[Vec<f64>]| {
                let d = a.len();
                let mut trace = 0.0;
                for i in 0..d {
                    for k in 0..d {
                        trace += a[i][k] * b[k][i];
                    }
                }
                trace
            };
            let (gx, gy) = (gram(x), gram(y));
            product_trace(&gx, &gy) / (product_trace(&gx, &gx) * product_trace(&gy, &gy)).sqrt()
        }

        pub fn centered(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let n = rows.len();
            let dist = |a: &[f64], b: &[f64]| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            };
            let mut d = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    d[i][j] = dist(&rows[i], &rows[j]);
                }
            }
            let row_mean: Vec<f64> = d.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
            let col_mean: Vec<f64> = (0..n)
                .map(|j| d.iter().map(|r| r[j]).sum::<f64>() / n as f64)
                .collect();
            let grand: f64 =
                d.iter().flatten().sum::<f64>() / (n * n) as f64;
            let mut out = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    out[i][j] = d[i][j] - row_mean[i] - col_mean[j] + grand;
                }
            }
            out
        }

        pub fn dcov2(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
            let (a, b) = (centered(x), centered(y));
            let n = a.len();
            let mut sum = 0.0;
            for i in 0..n {
                for j in 0..n {
                    sum += a[i][j] * b[i][j];
                }
            }
            sum / (n * n) as f64
        }

        pub fn dcor(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
            (dcov2(x, y).max(0.0) / (dcov2(x, x) * dcov2(y, y)).sqrt()).sqrt()
        }
    }

    fn rows(m: &PatientMatrix<f64>) -> Vec<Vec<f64>> {
        m.data.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn rv_self_similarity_is_one() {
        let x = matrix("x", array![[1.0, 2.0], [0.5, -1.0]]);
        assert!((rv_coefficient(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rv_disjoint_row_support_is_zero() {
        let x = matrix("x", array![[1.0, 2.0], [0.0, 0.0]]);
        let y = matrix("y", array![[0.0, 0.0, 0.0], [3.0, 1.0, -2.0]]);
        assert!(rv_coefficient(&x, &y).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rv_zero_matrix_is_undefined() {
        let x = matrix("x", Array2::zeros((2, 3)));
        let y = matrix("y", array![[1.0], [2.0]]);
        assert!(matches!(
            rv_coefficient(&x, &y),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn rv_matches_oracle_on_mixed_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 3, 4);
        let y = random_matrix(&mut rng, 3, 6);
        let fast = rv_coefficient(&x, &y).unwrap();
        let slow = oracle::rv(&rows(&x), &rows(&y));
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn centering_two_identical_points_is_zero() {
        let points = array![[1.0, 2.0], [1.0, 2.0]];
        let centered = center_distance_matrix(&points).unwrap();
        assert!(centered.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn centering_three_collinear_points_by_hand() {
        // points 0, 1, 2 on a line; distances are |i - j|
        let points: Array2<f64> = array![[0.0], [1.0], [2.0]];
        let centered = center_distance_matrix(&points).unwrap();
        let expected = array![
            [-10.0 / 9.0, 2.0 / 9.0, 8.0 / 9.0],
            [2.0 / 9.0, -4.0 / 9.0, 2.0 / 9.0],
            [8.0 / 9.0, 2.0 / 9.0, -10.0 / 9.0],
        ];
        for (a, b) in centered.values.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12_f64, "{a} vs {b}");
        }
    }

    #[test]
    fn centering_single_point_is_error() {
        assert!(center_distance_matrix(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn centered_row_and_column_sums_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let points =
            Array2::from_shape_vec((6, 3), (0..18).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .unwrap();
        let max_dist = 20.0;
        let centered = center_distance_matrix(&points).unwrap();
        for i in 0..6 {
            let row_sum: f64 = centered.values.row(i).sum();
            let col_sum: f64 = centered.values.column(i).sum();
            assert!(row_sum.abs() < 1e-9 * 6.0 * max_dist);
            assert!(col_sum.abs() < 1e-9 * 6.0 * max_dist);
        }
    }

    #[test]
    fn dcov_self_dependence_positive_and_constant_rows_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_matrix(&mut rng, 5, 4);
        assert!(distance_covariance(&x, &x).unwrap() > 0.0);

        let constant = matrix("c", Array2::from_elem((5, 4), 3.25));
        let y = random_matrix(&mut rng, 5, 4);
        assert!(distance_covariance(&constant, &y).unwrap().abs() < 1e-15);
    }

    #[test]
    fn dcov_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_matrix(&mut rng, 5, 3);
        let y = random_matrix(&mut rng, 5, 7);
        let fast = distance_covariance(&x, &y).unwrap();
        let slow = oracle::dcov2(&rows(&x), &rows(&y));
        assert!((fast - slow).abs() < 1e-12);
    }

    #[test]
    fn dcor_self_is_one_and_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let x = random_matrix(&mut rng, 6, 4);
        assert!((distance_correlation(&x, &x).unwrap() - 1.0).abs() < 1e-12);

        let y = random_matrix(&mut rng, 6, 5);
        let fast = distance_correlation(&x, &y).unwrap();
        let slow = oracle::dcor(&rows(&x), &rows(&y));
        assert!((fast - slow).abs() < 1e-10);
    }

    #[test]
    fn dcor_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let x = random_matrix(&mut rng, 5, 4);
        let y = random_matrix(&mut rng, 5, 6);
        let base = distance_correlation(&x, &y).unwrap();
        for c in [0.1, 3.0, 100.0] {
            let scaled = matrix("s", x.data.mapv(|v| v * c));
            let value = distance_correlation(&scaled, &y).unwrap();
            assert!((value - base).abs() < 1e-10, "scale {c}: {value} vs {base}");
        }
        // positive scaling of one argument also leaves self-correlation at 1
        let scaled = matrix("s", x.data.mapv(|v| v * 3.0));
        assert!((distance_correlation(&scaled, &x).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dcor_constant_marginal_is_undefined() {
        let constant = matrix("c", Array2::from_elem((4, 3), 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let y = random_matrix(&mut rng, 4, 3);
        assert!(matches!(
            distance_correlation(&constant, &y),
            Err(Error::UndefinedSimilarity(_))
        ));
    }

    #[test]
    fn similarity_matrix_single_patient() {
        let x = matrix("only", array![[1.0], [2.0]]);
        let sim = build_similarity_matrix(&[x], Measure::Rv).unwrap();
        assert_eq!(sim.scores, array![[1.0]]);
    }

    #[test]
    fn similarity_matrix_symmetric_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let a = random_matrix(&mut rng, 4, 3);
        let mut b = random_matrix(&mut rng, 4, 5);
        b.patient_id = "b".into();
        let duplicate = PatientMatrix {
            patient_id: "dup".into(),
            ..a.clone()
        };
        let sim = build_similarity_matrix(&[a, b, duplicate], Measure::Rv).unwrap();
        assert_eq!(sim.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(sim.scores[(i, j)], sim.scores[(j, i)]);
            }
        }
        // duplicated patient scores 1 off the diagonal
        assert!((sim.scores[(0, 2)] - 1.0).abs() < 1e-12);
        assert_eq!(sim.undefined_pairs, 0);
    }

    #[test]
    fn undefined_pairs_become_zero_with_warning_count() {
        let zero = matrix("z", Array2::zeros((3, 2)));
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let ok = random_matrix(&mut rng, 3, 2);
        let sim = build_similarity_matrix(&[zero, ok], Measure::Rv).unwrap();
        assert_eq!(sim.scores[(0, 1)], 0.0);
        assert_eq!(sim.undefined_pairs, 1);
    }

    #[test]
    fn similarity_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let patients: Vec<PatientMatrix<f64>> = (0..4)
            .map(|i| {
                let mut m = random_matrix(&mut rng, 3, 4);
                m.patient_id = format!("p{i}");
                m
            })
            .collect();
        let sim = build_similarity_matrix(&patients, Measure::Dcor).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sim.csv");
        write_similarity_csv(&sim, &path).unwrap();
        let back: SimilarityMatrix<f64> = read_similarity_csv(&path, Measure::Dcor).unwrap();
        assert_eq!(back.ids, sim.ids);
        assert_eq!(back.scores, sim.scores);
    }

    #[test]
    fn works_in_single_precision() {
        let x = PatientMatrix::<f32> {
            patient_id: "x".into(),
            data: array![[1.0f32, 2.0], [0.0, 1.0]],
            visit_dates: Vec::new(),
        };
        assert!((rv_coefficient(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn gram_matrix_is_symmetric_and_psd(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..8);
            let n = rng.gen_range(1..6);
            let x = random_matrix(&mut rng, d, n);
            let gram = GramMatrix::of(&x);
            for i in 0..d {
                for j in 0..d {
                    prop_assert_eq!(gram.0[(i, j)], gram.0[(j, i)]);
                }
            }
            // positive semidefinite: quadratic forms stay nonnegative
            for _ in 0..20 {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut quad = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        quad += v[i] * gram.0[(i, j)] * v[j];
                    }
                }
                prop_assert!(quad >= -1e-10, "negative quadratic form {quad}");
            }
        }

        #[test]
        fn rv_and_dcor_bounded_and_symmetric(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..8);
            let nx = rng.gen_range(2..6);
            let ny = rng.gen_range(2..6);
            let x = random_matrix(&mut rng, d, nx);
            let y = random_matrix(&mut rng, d, ny);

            let rv_xy = rv_coefficient(&x, &y).unwrap();
            let rv_yx = rv_coefficient(&y, &x).unwrap();
            prop_assert!(rv_xy >= -1e-12 && rv_xy <= 1.0 + 1e-12);
            prop_assert_eq!(rv_xy, rv_yx);

            let dc_xy = distance_correlation(&x, &y).unwrap();
            let dc_yx = distance_correlation(&y, &x).unwrap();
            prop_assert!(dc_xy >= -1e-12 && dc_xy <= 1.0 + 1e-12);
            prop_assert!((dc_xy - dc_yx).abs() < 1e-12);
        }
    }
}
