//! Longitudinal event records: domain types, file ingestion, vocabulary
//! construction and the standard frequency filters.
//!
//! The on-disk event format is one event per line, either JSONL
//! (`{"patient_id":…, "date":"YYYY-MM-DD", "code":…, "kind":…, "cohort":…}`)
//! or CSV with header `patient_id,date,code,kind,cohort`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Broad class of a clinical event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Diagnosis,
    Medication,
    Other,
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagnosis" => Ok(EventKind::Diagnosis),
            "medication" => Ok(EventKind::Medication),
            "other" => Ok(EventKind::Other),
            _ => Err(Error::InvalidInput(format!("unknown event kind `{s}`"))),
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Diagnosis => "diagnosis",
            EventKind::Medication => "medication",
            EventKind::Other => "other",
        };
        f.write_str(s)
    }
}

/// A single coded event observed on a calendar date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedicalEvent {
    pub code: String,
    pub date: NaiveDate,
    pub kind: EventKind,
}

/// All events a patient accrued on one date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub date: NaiveDate,
    pub events: Vec<MedicalEvent>,
}

/// One patient's visit history, visits strictly ascending by date.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub cohort: Option<String>,
}

impl PatientRecord {
    /// Number of visits (the temporal length of the record).
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    /// Total event count across all visits.
    pub fn event_count(&self) -> usize {
        self.visits.iter().map(|v| v.events.len()).sum()
    }

    /// Events in time order.
    pub fn events(&self) -> impl Iterator<Item = &MedicalEvent> {
        self.visits.iter().flat_map(|v| v.events.iter())
    }

    /// Event codes in time order.
    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.events().map(|e| e.code.as_str())
    }
}

/// Dense index over event codes with per-code support counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
    patient_counts: Vec<usize>,
    occurrence_counts: Vec<usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from bare codes with zeroed counts.
    /// Duplicates are dropped; the first occurrence keeps its position.
    pub fn from_codes<I, S>(codes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            codes: Vec::new(),
            index: HashMap::new(),
            patient_counts: Vec::new(),
            occurrence_counts: Vec::new(),
        };
        for code in codes {
            let code = code.into();
            if !vocab.index.contains_key(&code) {
                vocab.index.insert(code.clone(), vocab.codes.len());
                vocab.codes.push(code);
                vocab.patient_counts.push(0);
                vocab.occurrence_counts.push(0);
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn code(&self, index: usize) -> &str {
        &self.codes[index]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    /// Number of distinct patients the code appears in.
    pub fn patient_count(&self, index: usize) -> usize {
        self.patient_counts[index]
    }

    /// Total occurrences of the code across all records.
    pub fn occurrence_count(&self, index: usize) -> usize {
        self.occurrence_counts[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventFileFormat {
    Jsonl,
    Csv,
}

impl FromStr for EventFileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(EventFileFormat::Jsonl),
            "csv" => Ok(EventFileFormat::Csv),
            _ => Err(Error::InvalidInput(format!("unknown event format `{s}`"))),
        }
    }
}

/// One event line on the wire.
#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    patient_id: String,
    date: String,
    code: String,
    kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cohort: Option<String>,
}

struct RecordBuilder {
    // date -> ordered, deduplicated codes with kinds
    days: BTreeMap<NaiveDate, Vec<(String, EventKind)>>,
    seen: HashSet<(NaiveDate, String)>,
    cohort: Option<String>,
}

/// Reads an event file and groups events into per-date visits,
/// one record per distinct patient id, sorted by patient id.
///
/// Identical `(patient, date, code)` triples are kept once; repeated
/// same-day billing of a code carries no extra context signal.
pub fn parse_events(path: impl AsRef<Path>, format: EventFileFormat) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = File::open(path)?;
    let reader = BufReader::new(file);

    let mut patients: BTreeMap<String, RecordBuilder> = BTreeMap::new();

    let mut push_row = |row: EventRow, line: usize| -> Result<()> {
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d").map_err(|e| Error::Parse {
            path: display.clone(),
            line,
            message: format!("invalid date `{}`: {e}", row.date),
        })?;
        if row.code.is_empty() {
            return Err(Error::Parse {
                path: display.clone(),
                line,
                message: "empty event code".into(),
            });
        }
        let entry = patients.entry(row.patient_id).or_insert_with(|| RecordBuilder {
            days: BTreeMap::new(),
            seen: HashSet::new(),
            cohort: None,
        });
        if let Some(cohort) = row.cohort {
            match &entry.cohort {
                Some(existing) if existing != &cohort => {
                    return Err(Error::Parse {
                        path: display.clone(),
                        line,
                        message: format!(
                            "conflicting cohort labels `{existing}` and `{cohort}` for one patient"
                        ),
                    });
                }
                _ => entry.cohort = Some(cohort),
            }
        }
        if entry.seen.insert((date, row.code.clone())) {
            entry.days.entry(date).or_default().push((row.code, row.kind));
        }
        Ok(())
    };

    match format {
        EventFileFormat::Jsonl => {
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let row: EventRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: display.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                push_row(row, i + 1)?;
            }
        }
        EventFileFormat::Csv => {
            let mut csv_reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .flexible(true)
                .from_reader(reader);
            for (i, result) in csv_reader.deserialize::<CsvRow>().enumerate() {
                // line 1 is the header
                let line = i + 2;
                let row = result.map_err(|e| Error::Parse {
                    path: display.clone(),
                    line,
                    message: e.to_string(),
                })?;
                push_row(row.into_event_row(line, &display)?, line)?;
            }
        }
    }

    Ok(patients
        .into_iter()
        .map(|(patient_id, builder)| PatientRecord {
            patient_id,
            cohort: builder.cohort,
            visits: builder
                .days
                .into_iter()
                .map(|(date, codes)| Visit {
                    date,
                    events: codes
                        .into_iter()
                        .map(|(code, kind)| MedicalEvent { code, date, kind })
                        .collect(),
                })
                .collect(),
        })
        .collect())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    patient_id: String,
    date: String,
    code: String,
    kind: String,
    #[serde(default)]
    cohort: Option<String>,
}

impl CsvRow {
    fn into_event_row(self, line: usize, path: &str) -> Result<EventRow> {
        let kind = self.kind.parse().map_err(|_| Error::Parse {
            path: path.to_string(),
            line,
            message: format!("unknown event kind `{}`", self.kind),
        })?;
        Ok(EventRow {
            patient_id: self.patient_id,
            date: self.date,
            code: self.code,
            kind,
            cohort: self.cohort.filter(|c| !c.is_empty()),
        })
    }
}

/// Writes records back out in the event-file format, one event per line,
/// the inverse of [`parse_events`] for records satisfying the type
/// invariants.
pub fn write_events(
    records: &[PatientRecord],
    path: impl AsRef<Path>,
    format: EventFileFormat,
) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    match format {
        EventFileFormat::Jsonl => {
            for record in records {
                for event in record.events() {
                    let row = EventRow {
                        patient_id: record.patient_id.clone(),
                        date: event.date.format("%Y-%m-%d").to_string(),
                        code: event.code.clone(),
                        kind: event.kind,
                        cohort: record.cohort.clone(),
                    };
                    serde_json::to_writer(&mut writer, &row)
                        .map_err(|e| Error::Format(e.to_string()))?;
                    writer.write_all(b"\n")?;
                }
            }
        }
        EventFileFormat::Csv => {
            let mut csv_writer = csv::Writer::from_writer(writer);
            csv_writer.write_record(["patient_id", "date", "code", "kind", "cohort"])?;
            for record in records {
                for event in record.events() {
                    csv_writer.write_record([
                        record.patient_id.as_str(),
                        &event.date.format("%Y-%m-%d").to_string(),
                        event.code.as_str(),
                        &event.kind.to_string(),
                        record.cohort.as_deref().unwrap_or(""),
                    ])?;
                }
            }
            csv_writer.flush()?;
            return Ok(());
        }
    }
    writer.flush()?;
    Ok(())
}

/// Keeps the codes whose patient-level support `s` satisfies
/// `min_patient_count <= s <= floor(max_patient_frac * #patients)`.
///
/// Codes supported by almost every patient carry no signal and very
/// rare codes are noise; the returned vocabulary is sorted by code.
pub fn filter_vocabulary(
    records: &[PatientRecord],
    max_patient_frac: f64,
    min_patient_count: usize,
) -> Vocabulary {
    assert!(
        max_patient_frac > 0.0 && max_patient_frac <= 1.0,
        "max_patient_frac must be in (0, 1]"
    );

    let mut patient_support: HashMap<&str, usize> = HashMap::new();
    let mut occurrences: HashMap<&str, usize> = HashMap::new();
    for record in records {
        let mut seen: HashSet<&str> = HashSet::new();
        for event in record.events() {
            *occurrences.entry(event.code.as_str()).or_default() += 1;
            if seen.insert(&event.code) {
                *patient_support.entry(event.code.as_str()).or_default() += 1;
            }
        }
    }

    let max_support = (max_patient_frac * records.len() as f64).floor() as usize;
    let mut kept: Vec<&str> = patient_support
        .iter()
        .filter(|(_, &s)| s >= min_patient_count && s <= max_support)
        .map(|(&code, _)| code)
        .collect();
    kept.sort_unstable();

    let mut vocab = Vocabulary::from_codes(kept.iter().map(|c| c.to_string()));
    for (i, code) in kept.iter().enumerate() {
        vocab.patient_counts[i] = patient_support[code];
        vocab.occurrence_counts[i] = occurrences[code];
    }
    vocab
}

/// Drops out-of-vocabulary events, then visits left empty, then patients
/// whose remaining event count falls below `min_events`.
pub fn filter_patients(
    records: &[PatientRecord],
    min_events: usize,
    vocabulary: &Vocabulary,
) -> Vec<PatientRecord> {
    records
        .iter()
        .filter_map(|record| {
            let visits: Vec<Visit> = record
                .visits
                .iter()
                .filter_map(|visit| {
                    let events: Vec<MedicalEvent> = visit
                        .events
                        .iter()
                        .filter(|e| vocabulary.contains(&e.code))
                        .cloned()
                        .collect();
                    (!events.is_empty()).then_some(Visit {
                        date: visit.date,
                        events,
                    })
                })
                .collect();
            let kept: usize = visits.iter().map(|v| v.events.len()).sum();
            (kept >= min_events && !visits.is_empty()).then_some(PatientRecord {
                patient_id: record.patient_id.clone(),
                visits,
                cohort: record.cohort.clone(),
            })
        })
        .collect()
}

/// Deterministic cohort-stratified split of patients into
/// (train, test, dev). Unlabeled patients form their own stratum.
pub fn stratified_split(
    records: &[PatientRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> (Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>) {
    let (f_train, f_test, f_dev) = fractions;
    assert!(
        (f_train + f_test + f_dev - 1.0).abs() < 1e-9,
        "split fractions must sum to 1"
    );

    let mut by_cohort: BTreeMap<&str, Vec<&PatientRecord>> = BTreeMap::new();
    for record in records {
        by_cohort
            .entry(record.cohort.as_deref().unwrap_or(""))
            .or_default()
            .push(record);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test, mut dev) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in by_cohort {
        group.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * f_train).round() as usize;
        let n_test = ((n as f64 * f_test).round() as usize).min(n - n_train.min(n));
        for (i, record) in group.into_iter().enumerate() {
            if i < n_train {
                train.push(record.clone());
            } else if i < n_train + n_test {
                test.push(record.clone());
            } else {
                dev.push(record.clone());
            }
        }
    }
    (train, test, dev)
}
