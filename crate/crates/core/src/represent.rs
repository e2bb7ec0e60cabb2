//! Patient-level representations: the temporal embedding matrix, the
//! one-hot event matrix, and the order-free summed vector.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array1, Array2};

use crate::ehr::{PatientRecord, Vocabulary};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::Real;

/// Temporal representation: a d x N_p matrix whose column j sums the
/// embedding vectors of every event in visit j.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientMatrix<F: Scalar = Real> {
    pub patient_id: String,
    pub data: Array2<F>,
    /// One date per column; empty for matrices read back from disk,
    /// since the text format does not carry dates.
    pub visit_dates: Vec<NaiveDate>,
}

impl<F: Scalar> PatientMatrix<F> {
    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_visits(&self) -> usize {
        self.data.ncols()
    }
}

/// Binary V x N_p matrix: entry (v, j) is 1 iff code v occurs in visit j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMatrix {
    pub patient_id: String,
    pub data: Array2<u8>,
}

/// Length-d vector summing the embeddings of every event in the record.
#[derive(Debug, Clone, PartialEq)]
pub struct SummedVector<F: Scalar = Real> {
    pub patient_id: String,
    pub data: Array1<F>,
}

/// Builds the temporal matrix; every code must be in the embedding's
/// vocabulary (filter the records first).
pub fn to_patient_matrix<F: Scalar>(
    record: &PatientRecord,
    table: &EmbeddingTable<F>,
) -> Result<PatientMatrix<F>> {
    let d = table.dim();
    let mut data = Array2::zeros((d, record.n_visits()));
    for (j, visit) in record.visits.iter().enumerate() {
        for event in &visit.events {
            let vector = table
                .vector(&event.code)
                .ok_or_else(|| Error::UnknownCode(event.code.clone()))?;
            let mut column = data.column_mut(j);
            column += &vector;
        }
    }
    Ok(PatientMatrix {
        patient_id: record.patient_id.clone(),
        data,
        visit_dates: record.visits.iter().map(|v| v.date).collect(),
    })
}

/// Scales every visit column to unit Euclidean norm; zero columns are
/// left untouched. Useful ahead of scale-sensitive scoring.
pub fn normalize_columns<F: Scalar>(matrix: &mut PatientMatrix<F>) {
    for mut column in matrix.data.columns_mut() {
        let norm = column.dot(&column).sqrt();
        if norm > F::zero() {
            column.mapv_inplace(|x| x / norm);
        }
    }
}

pub fn to_one_hot(record: &PatientRecord, vocabulary: &Vocabulary) -> Result<OneHotMatrix> {
    let mut data = Array2::zeros((vocabulary.len(), record.n_visits()));
    for (j, visit) in record.visits.iter().enumerate() {
        for event in &visit.events {
            let v = vocabulary
                .index_of(&event.code)
                .ok_or_else(|| Error::UnknownCode(event.code.clone()))?;
            data[(v, j)] = 1;
        }
    }
    Ok(OneHotMatrix {
        patient_id: record.patient_id.clone(),
        data,
    })
}

pub fn to_summed_vector<F: Scalar>(
    record: &PatientRecord,
    table: &EmbeddingTable<F>,
) -> Result<SummedVector<F>> {
    let mut data = Array1::zeros(table.dim());
    for event in record.events() {
        let vector = table
            .vector(&event.code)
            .ok_or_else(|| Error::UnknownCode(event.code.clone()))?;
        data += &vector;
    }
    Ok(SummedVector {
        patient_id: record.patient_id.clone(),
        data,
    })
}

/// Writes matrices as consecutive text blocks: a `patient_id d N_p`
/// header line, then d rows of N_p space-separated values.
pub fn write_matrices<F: Scalar>(
    matrices: &[PatientMatrix<F>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for matrix in matrices {
        writeln!(writer, "{} {} {}", matrix.patient_id, matrix.dim(), matrix.n_visits())?;
        for row in matrix.data.rows() {
            let mut first = true;
            for value in row {
                if !first {
                    write!(writer, " ")?;
                }
                write!(writer, "{value}")?;
                first = false;
            }
            writeln!(writer)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Reads the [`write_matrices`] block format.
pub fn read_matrices<F: Scalar>(path: impl AsRef<Path>) -> Result<Vec<PatientMatrix<F>>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let mut matrices = Vec::new();

    while let Some(header) = lines.next() {
        let header = header?;
        if header.trim().is_empty() {
            continue;
        }
        let mut parts = header.split_whitespace();
        let patient_id = parts
            .next()
            .ok_or_else(|| Error::Format("missing patient id in matrix header".into()))?
            .to_string();
        let d: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad dimension for `{patient_id}`")))?;
        let n: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad visit count for `{patient_id}`")))?;

        let mut data = Vec::with_capacity(d * n);
        for row in 0..d {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("`{patient_id}`: truncated at row {row}")))??;
            let before = data.len();
            for token in line.split_whitespace() {
                let value: f64 = token.parse().map_err(|_| {
                    Error::Format(format!("`{patient_id}` row {row}: bad number `{token}`"))
                })?;
                data.push(F::of(value));
            }
            if data.len() - before != n {
                return Err(Error::Format(format!(
                    "`{patient_id}` row {row}: expected {n} values, found {}",
                    data.len() - before
                )));
            }
        }
        matrices.push(PatientMatrix {
            patient_id,
            data: Array2::from_shape_vec((d, n), data)
                .map_err(|e| Error::Format(e.to_string()))?,
            visit_dates: Vec::new(),
        });
    }
    Ok(matrices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EventKind, MedicalEvent, Visit};
    use ndarray::array;
    use proptest::prelude::*;

    fn table(codes: &[&str], rows: Vec<Vec<f64>>) -> EmbeddingTable<f64> {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        EmbeddingTable {
            vocabulary: Vocabulary::from_codes(codes.iter().map(|c| c.to_string())),
            vectors: Array2::from_shape_vec((codes.len(), d), flat).unwrap(),
            context_vectors: Array2::zeros((codes.len(), d)),
        }
    }

    fn record(id: &str, days: &[(&str, &[&str])]) -> PatientRecord {
        PatientRecord {
            patient_id: id.to_string(),
            cohort: None,
            visits: days
                .iter()
                .map(|(date, codes)| {
                    let date: NaiveDate = date.parse().unwrap();
                    Visit {
                        date,
                        events: codes
                            .iter()
                            .map(|c| MedicalEvent {
                                code: c.to_string(),
                                date,
                                kind: EventKind::Diagnosis,
                            })
                            .collect(),
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn single_event_matrix_is_its_embedding() {
        let table = table(&["a", "b"], vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        let record = record("p", &[("2010-01-01", &["a"])]);
        let matrix = to_patient_matrix(&record, &table).unwrap();
        assert_eq!(matrix.data, array![[1.0], [2.0]]);
        assert_eq!(matrix.visit_dates.len(), 1);
    }

    #[test]
    fn two_visit_matrix_matches_hand_computation() {
        // visit 1 = {a}, visit 2 = {a, b}; columns are per-visit sums
        let table = table(&["a", "b"], vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        let record = record("p", &[("2010-01-01", &["a"]), ("2010-02-01", &["a", "b"])]);
        let matrix = to_patient_matrix(&record, &table).unwrap();
        assert_eq!(matrix.data, array![[1.0, 4.0], [2.0, 1.0]]);
    }

    #[test]
    fn oov_code_is_an_error_naming_the_code() {
        let table = table(&["a"], vec![vec![1.0]]);
        let record = record("p", &[("2010-01-01", &["mystery"])]);
        match to_patient_matrix(&record, &table) {
            Err(Error::UnknownCode(code)) => assert_eq!(code, "mystery"),
            other => panic!("expected unknown-code error, got {other:?}"),
        }
    }

    #[test]
    fn one_hot_single_event() {
        let vocab = Vocabulary::from_codes(["a", "b", "c"]);
        let record = record("p", &[("2010-01-01", &["b"])]);
        let one_hot = to_one_hot(&record, &vocab).unwrap();
        assert_eq!(one_hot.data.sum(), 1);
        assert_eq!(one_hot.data[(1, 0)], 1);
    }

    #[test]
    fn one_hot_column_sums_count_distinct_codes() {
        let vocab = Vocabulary::from_codes(["a", "b", "c"]);
        let record = record("p", &[("2010-01-01", &["a", "c"]), ("2010-02-01", &["b"])]);
        let one_hot = to_one_hot(&record, &vocab).unwrap();
        let sums: Vec<u32> = one_hot
            .data
            .columns()
            .into_iter()
            .map(|c| c.iter().map(|&x| x as u32).sum())
            .collect();
        assert_eq!(sums, vec![2, 1]);
    }

    #[test]
    fn summed_vector_is_column_sum_and_single_visit_column() {
        let table = table(&["a", "b"], vec![vec![1.0, 2.0], vec![3.0, -1.0]]);
        let record = record("p", &[("2010-01-01", &["a", "b"])]);
        let matrix = to_patient_matrix(&record, &table).unwrap();
        let summed = to_summed_vector(&record, &table).unwrap();
        assert_eq!(summed.data, matrix.data.column(0).to_owned());
    }

    #[test]
    fn normalize_columns_gives_unit_norms() {
        let table = table(&["a"], vec![vec![3.0, 4.0]]);
        let record = record("p", &[("2010-01-01", &["a"])]);
        let mut matrix = to_patient_matrix(&record, &table).unwrap();
        normalize_columns(&mut matrix);
        let norm: f64 = matrix.data.column(0).dot(&matrix.data.column(0));
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matrices_round_trip_through_text() {
        let table = table(&["a", "b"], vec![vec![0.125, -2.5], vec![1e-9, 3.0]]);
        let records = vec![
            record("p1", &[("2010-01-01", &["a"]), ("2010-02-01", &["b"])]),
            record("p2", &[("2010-03-01", &["a", "b"])]),
        ];
        let matrices: Vec<_> = records
            .iter()
            .map(|r| to_patient_matrix(r, &table).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrices.txt");
        write_matrices(&matrices, &path).unwrap();
        let back: Vec<PatientMatrix<f64>> = read_matrices(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in matrices.iter().zip(&back) {
            assert_eq!(a.patient_id, b.patient_id);
            assert_eq!(a.data, b.data);
        }
    }

    fn arb_day_codes() -> impl Strategy<Value = Vec<(String, Vec<&'static str>)>> {
        prop::collection::btree_map(
            0u32..28,
            prop::collection::btree_set(prop::sample::select(vec!["a", "b", "c"]), 1..4),
            1..6,
        )
        .prop_map(|days| {
            days.into_iter()
                .map(|(day, codes)| {
                    (
                        format!("2010-01-{:02}", day + 1),
                        codes.into_iter().collect::<Vec<_>>(),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn summed_vector_equals_matrix_column_sum(days in arb_day_codes()) {
            let table = table(
                &["a", "b", "c"],
                vec![vec![0.3, -1.2, 7.0], vec![2.0, 0.01, -3.0], vec![-0.5, 4.0, 0.25]],
            );
            let days: Vec<(&str, &[&str])> =
                days.iter().map(|(d, c)| (d.as_str(), c.as_slice())).collect();
            let record = record("p", &days);
            let matrix = to_patient_matrix(&record, &table).unwrap();
            let summed = to_summed_vector(&record, &table).unwrap();
            let column_sum = matrix.data.sum_axis(ndarray::Axis(1));
            for (s, c) in summed.data.iter().zip(column_sum.iter()) {
                let scale = s.abs().max(c.abs()).max(1.0);
                prop_assert!((s - c).abs() / scale < 1e-12);
            }
        }

        #[test]
        fn visit_permutation_permutes_columns(days in arb_day_codes(), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let table = table(
                &["a", "b", "c"],
                vec![vec![0.3, -1.2, 7.0], vec![2.0, 0.01, -3.0], vec![-0.5, 4.0, 0.25]],
            );
            let days: Vec<(&str, &[&str])> =
                days.iter().map(|(d, c)| (d.as_str(), c.as_slice())).collect();
            let record = record("p", &days);
            let matrix = to_patient_matrix(&record, &table).unwrap();

            let mut order: Vec<usize> = (0..record.n_visits()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted_record = PatientRecord {
                patient_id: record.patient_id.clone(),
                cohort: None,
                visits: order.iter().map(|&i| record.visits[i].clone()).collect(),
            };
            let permuted = to_patient_matrix(&permuted_record, &table).unwrap();
            for (new_col, &old_col) in order.iter().enumerate() {
                prop_assert_eq!(permuted.data.column(new_col), matrix.data.column(old_col));
            }
        }
    }
}
