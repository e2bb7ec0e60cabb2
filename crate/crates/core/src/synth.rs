//! Synthetic multi-cohort event records with controllable cohort signal.
//!
//! The generator stands in for a real longitudinal database: each cohort
//! draws from a mix of shared background codes and its own specific
//! codes, a handful of which act as explicit cohort identifiers.
//! Chronic-flagged codes recur across a patient's visits, so adaptive
//! context windows have a frequency asymmetry to work with. Same-cohort
//! patients express different random subsets of their cohort's codes,
//! which keeps raw code-presence overlap weak while leaving plenty of
//! co-occurrence structure for the embedding stage.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{EventKind, MedicalEvent, PatientRecord, Visit};
use crate::error::{Error, Result};

/// Recurrence probability per visit for a patient's identifier condition.
const IDENTIFIER_RECUR_P: f64 = 0.50;
/// Recurrence probability per visit for other chronic conditions.
const CHRONIC_RECUR_P: f64 = 0.40;
/// Share of acute draws taken from the cohort-specific pool.
const SPECIFIC_MIX: f64 = 0.12;
/// Chronic cohort-specific conditions carried per patient.
const CHRONIC_SPECIFIC_PER_PATIENT: usize = 2;
/// Chronic shared conditions carried per patient.
const CHRONIC_SHARED_PER_PATIENT: usize = 5;
/// Identifier codes per cohort, as a fraction of its specific pool.
const IDENTIFIER_FRAC: f64 = 0.125;
/// Span of generated visit dates, in days.
const SPAN_DAYS: u64 = 1461;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_cohorts: usize,
    pub patients_per_cohort: usize,
    pub vocab_size: usize,
    /// Fraction of codes common to all cohorts.
    pub shared_vocab_frac: f64,
    /// Fraction of codes unique to each cohort.
    pub cohort_specific_frac: f64,
    pub mean_events_per_patient: usize,
    pub visits_per_patient_range: (usize, usize),
    /// Fraction of codes that recur within a patient once acquired.
    pub chronic_frac: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cohorts: 4,
            patients_per_cohort: 200,
            vocab_size: 400,
            shared_vocab_frac: 0.60,
            cohort_specific_frac: 0.08,
            mean_events_per_patient: 60,
            visits_per_patient_range: (8, 16),
            chronic_frac: 0.30,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_cohorts", self.n_cohorts),
            ("patients_per_cohort", self.patients_per_cohort),
            ("vocab_size", self.vocab_size),
            ("mean_events_per_patient", self.mean_events_per_patient),
            ("visits min", self.visits_per_patient_range.0),
            ("visits max", self.visits_per_patient_range.1),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.visits_per_patient_range.0 > self.visits_per_patient_range.1 {
            return Err(Error::Config("visit range min exceeds max".into()));
        }
        if self.visits_per_patient_range.1 as u64 > SPAN_DAYS {
            return Err(Error::Config("more visits than days in the span".into()));
        }
        for (name, frac) in [
            ("shared_vocab_frac", self.shared_vocab_frac),
            ("cohort_specific_frac", self.cohort_specific_frac),
            ("chronic_frac", self.chronic_frac),
        ] {
            if !(0.0..=1.0).contains(&frac) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        let total = self.shared_vocab_frac + self.n_cohorts as f64 * self.cohort_specific_frac;
        if total > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "shared_vocab_frac + n_cohorts * cohort_specific_frac = {total:.3} exceeds 1"
            )));
        }
        Ok(())
    }
}

/// Which cohort each generated patient belongs to, and which codes act
/// as explicit identifiers of each cohort.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub cohorts: BTreeMap<String, String>,
    pub identifier_codes: BTreeMap<String, Vec<String>>,
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut writer, self).map_err(|e| Error::Format(e.to_string()))?;
        use std::io::Write;
        writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format(e.to_string()))
    }
}

struct CodePools {
    /// All code names, index-addressed.
    codes: Vec<String>,
    shared: Vec<usize>,
    specific: Vec<Vec<usize>>,
    identifiers: Vec<Vec<usize>>,
    chronic: Vec<bool>,
}

fn code_name(index: usize) -> String {
    // Alternate diagnosis-like and medication-like codes.
    if index % 2 == 0 {
        format!("D{:04}", index)
    } else {
        format!("M{:04}", index)
    }
}

fn kind_of(code: &str) -> EventKind {
    if code.starts_with('D') {
        EventKind::Diagnosis
    } else {
        EventKind::Medication
    }
}

fn build_pools(config: &SynthConfig) -> CodePools {
    let v = config.vocab_size;
    let n_shared = (config.shared_vocab_frac * v as f64).floor() as usize;
    let n_specific = (config.cohort_specific_frac * v as f64).floor() as usize;

    let codes: Vec<String> = (0..v).map(code_name).collect();
    let mut shared: Vec<usize> = (0..n_shared).collect();
    let mut specific = Vec::with_capacity(config.n_cohorts);
    let mut identifiers = Vec::with_capacity(config.n_cohorts);
    for c in 0..config.n_cohorts {
        let start = n_shared + c * n_specific;
        let pool: Vec<usize> = (start..start + n_specific).collect();
        let n_ids = ((n_specific as f64 * IDENTIFIER_FRAC).ceil() as usize)
            .clamp(usize::from(!pool.is_empty()), pool.len().max(1));
        let ids: Vec<usize> = pool.iter().copied().take(n_ids).collect();
        identifiers.push(ids);
        specific.push(pool);
    }
    // Leftover codes join the shared background.
    shared.extend(n_shared + config.n_cohorts * n_specific..v);

    // Flag chronic codes: a leading slice of the shared pool, and in
    // each specific pool the slice right after the identifiers, so the
    // two signal kinds stay disjoint. Identifiers always recur.
    let mut chronic = vec![false; v];
    {
        let mut flag = |pool: &[usize], skip: usize| {
            let n = (config.chronic_frac * pool.len() as f64).round() as usize;
            for &idx in pool.iter().skip(skip).take(n) {
                chronic[idx] = true;
            }
        };
        flag(&shared, 0);
        for (pool, ids) in specific.iter().zip(&identifiers) {
            flag(pool, ids.len());
        }
    }
    for ids in &identifiers {
        for &idx in ids {
            chronic[idx] = true;
        }
    }

    CodePools {
        codes,
        shared,
        specific,
        identifiers,
        chronic,
    }
}

/// Mildly skewed draw weights so a few codes in each pool dominate.
fn pool_weights(len: usize) -> Vec<f64> {
    (0..len).map(|r| 1.0 / (r as f64 + 1.0).powf(0.7)).collect()
}

fn sample_distinct<R: Rng>(
    rng: &mut R,
    pool: &[usize],
    count: usize,
    exclude: &HashSet<usize>,
) -> Vec<usize> {
    let mut picked = Vec::new();
    let mut tries = 0;
    let want = count.min(pool.len());
    while picked.len() < want && tries < 50 * count.max(1) {
        let candidate = pool[rng.gen_range(0..pool.len())];
        if !exclude.contains(&candidate) && !picked.contains(&candidate) {
            picked.push(candidate);
        }
        tries += 1;
    }
    picked
}

/// Generates labeled records plus the ground truth needed to score
/// clusterings and to rebuild the identifier-stripped variant.
/// Output is a pure function of the config.
pub fn generate(config: &SynthConfig) -> Result<(Vec<PatientRecord>, GroundTruth)> {
    config.validate()?;
    let pools = build_pools(config);
    let base_date: NaiveDate = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();

    let shared_weights = WeightedIndex::new(pool_weights(pools.shared.len()))
        .map_err(|e| Error::Config(format!("shared pool: {e}")))?;
    let specific_weights: Vec<Option<WeightedIndex<f64>>> = pools
        .specific
        .iter()
        .map(|p| WeightedIndex::new(pool_weights(p.len())).ok())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    let mut cohorts = BTreeMap::new();

    for c in 0..config.n_cohorts {
        let cohort_name = format!("cohort{c}");
        for p in 0..config.patients_per_cohort {
            let patient_id = format!("p{c}-{p:04}");
            cohorts.insert(patient_id.clone(), cohort_name.clone());

            let (visits_min, visits_max) = config.visits_per_patient_range;
            let n_visits = rng.gen_range(visits_min..=visits_max);
            let mut day_offsets =
                rand::seq::index::sample(&mut rng, SPAN_DAYS as usize, n_visits).into_vec();
            day_offsets.sort_unstable();
            let dates: Vec<NaiveDate> = day_offsets
                .into_iter()
                .map(|d| base_date + Days::new(d as u64))
                .collect();

            // The patient's recurring conditions: one cohort identifier,
            // a few cohort-specific chronics, a few shared chronics.
            let mut exclude = HashSet::new();
            let mut identifier_conditions = Vec::new();
            if let Some(ids) = pools.identifiers.get(c) {
                if !ids.is_empty() {
                    let pick = ids[rng.gen_range(0..ids.len())];
                    identifier_conditions.push(pick);
                    exclude.insert(pick);
                }
            }
            let chronic_specific_pool: Vec<usize> = pools.specific[c]
                .iter()
                .copied()
                .filter(|&i| pools.chronic[i] && !pools.identifiers[c].contains(&i))
                .collect();
            let chronic_specific =
                sample_distinct(&mut rng, &chronic_specific_pool, CHRONIC_SPECIFIC_PER_PATIENT, &exclude);
            exclude.extend(&chronic_specific);
            let chronic_shared_pool: Vec<usize> = pools
                .shared
                .iter()
                .copied()
                .filter(|&i| pools.chronic[i])
                .collect();
            let chronic_shared =
                sample_distinct(&mut rng, &chronic_shared_pool, CHRONIC_SHARED_PER_PATIENT, &exclude);

            let target_events = ((config.mean_events_per_patient as f64
                * rng.gen_range(0.85..1.15))
                .round() as usize)
                .max(n_visits);

            let mut visit_codes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_visits];
            let mut placed = 0usize;

            for codes in visit_codes.iter_mut() {
                for &id in &identifier_conditions {
                    if rng.gen_bool(IDENTIFIER_RECUR_P) && codes.insert(id) {
                        placed += 1;
                    }
                }
                for &cond in chronic_specific.iter().chain(&chronic_shared) {
                    if rng.gen_bool(CHRONIC_RECUR_P) && codes.insert(cond) {
                        placed += 1;
                    }
                }
                // every visit records at least one event
                if codes.is_empty() {
                    let idx = pools.shared[shared_weights.sample(&mut rng)];
                    codes.insert(idx);
                    placed += 1;
                }
            }

            // Acute fills up to the per-patient budget.
            let mut tries = 0;
            while placed < target_events && tries < target_events * 20 {
                let visit = rng.gen_range(0..n_visits);
                let use_specific = !pools.specific[c].is_empty() && rng.gen_bool(SPECIFIC_MIX);
                let idx = if use_specific {
                    let w = specific_weights[c].as_ref().unwrap();
                    pools.specific[c][w.sample(&mut rng)]
                } else {
                    pools.shared[shared_weights.sample(&mut rng)]
                };
                if visit_codes[visit].insert(idx) {
                    placed += 1;
                }
                tries += 1;
            }

            let visits: Vec<Visit> = dates
                .into_iter()
                .zip(visit_codes)
                .map(|(date, codes)| Visit {
                    date,
                    events: codes
                        .into_iter()
                        .map(|idx| MedicalEvent {
                            code: pools.codes[idx].clone(),
                            date,
                            kind: kind_of(&pools.codes[idx]),
                        })
                        .collect(),
                })
                .collect();

            records.push(PatientRecord {
                patient_id,
                visits,
                cohort: Some(cohort_name.clone()),
            });
        }
    }

    records.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    let identifier_codes = pools
        .identifiers
        .iter()
        .enumerate()
        .map(|(c, ids)| {
            (
                format!("cohort{c}"),
                ids.iter().map(|&i| pools.codes[i].clone()).collect(),
            )
        })
        .collect();

    Ok((
        records,
        GroundTruth {
            cohorts,
            identifier_codes,
        },
    ))
}

/// Removes every event carrying a cohort-identifier code, then drops
/// patients left with fewer than `min_events` events. This rebuilds the
/// harder evaluation variant where the giveaway codes are absent.
pub fn strip_identifiers(
    records: &[PatientRecord],
    truth: &GroundTruth,
    min_events: usize,
) -> Vec<PatientRecord> {
    let banned: HashSet<&str> = truth
        .identifier_codes
        .values()
        .flat_map(|codes| codes.iter().map(|c| c.as_str()))
        .collect();

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
                        .filter(|e| !banned.contains(e.code.as_str()))
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

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_cohorts: 3,
            patients_per_cohort: 30,
            vocab_size: 120,
            mean_events_per_patient: 50,
            visits_per_patient_range: (6, 12),
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let config = small_config();
        let (a, ta) = generate(&config).unwrap();
        let (b, tb) = generate(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn single_cohort_maps_everyone_to_it() {
        let config = SynthConfig {
            n_cohorts: 1,
            patients_per_cohort: 10,
            ..small_config()
        };
        let (records, truth) = generate(&config).unwrap();
        assert_eq!(records.len(), 10);
        assert!(truth.cohorts.values().all(|c| c == "cohort0"));
    }

    #[test]
    fn scale_tracks_mean_events() {
        let config = SynthConfig {
            n_cohorts: 4,
            patients_per_cohort: 50,
            mean_events_per_patient: 124,
            visits_per_patient_range: (10, 30),
            vocab_size: 600,
            ..SynthConfig::default()
        };
        let (records, _) = generate(&config).unwrap();
        assert_eq!(records.len(), 200);
        let total: usize = records.iter().map(|r| r.event_count()).sum();
        let mean = total as f64 / records.len() as f64;
        assert!(
            (mean - 124.0).abs() < 124.0 * 0.20,
            "mean events per patient {mean:.1} drifted from target"
        );
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = SynthConfig {
            shared_vocab_frac: 0.8,
            cohort_specific_frac: 0.2,
            n_cohorts: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(generate(&config), Err(Error::Config(_))));
        let config = SynthConfig {
            patients_per_cohort: 0,
            ..SynthConfig::default()
        };
        assert!(generate(&config).is_err());
    }

    #[test]
    fn records_satisfy_type_invariants() {
        let (records, _) = generate(&small_config()).unwrap();
        for record in &records {
            assert!(record.n_visits() >= 1);
            for visit in &record.visits {
                assert!(!visit.events.is_empty());
                assert!(visit.events.iter().all(|e| e.date == visit.date));
            }
            for pair in record.visits.windows(2) {
                assert!(pair[0].date < pair[1].date, "visits must be strictly sorted");
            }
        }
    }

    #[test]
    fn specific_codes_stay_in_their_cohort() {
        let config = small_config();
        let (records, truth) = generate(&config).unwrap();
        let pools = build_pools(&config);
        for (c, pool) in pools.specific.iter().enumerate() {
            let cohort = format!("cohort{c}");
            let specific: HashSet<&str> =
                pool.iter().map(|&i| pools.codes[i].as_str()).collect();
            for record in &records {
                if truth.cohorts[&record.patient_id] != cohort {
                    assert!(
                        record.codes().all(|code| !specific.contains(code)),
                        "cohort-specific code leaked across cohorts"
                    );
                }
            }
        }
    }

    #[test]
    fn cohort_label_and_specific_codes_share_information() {
        // Mutual information between the label and the presence of each
        // cohort's specific codes, estimated by counting.
        let (records, truth) = generate(&small_config()).unwrap();
        let n = records.len() as f64;
        for (cohort, ids) in &truth.identifier_codes {
            let marker: HashSet<&str> = ids.iter().map(|c| c.as_str()).collect();
            let mut joint = [[0.0f64; 2]; 2];
            for record in &records {
                let in_cohort = (&truth.cohorts[&record.patient_id] == cohort) as usize;
                let has_code = record.codes().any(|c| marker.contains(c)) as usize;
                joint[in_cohort][has_code] += 1.0;
            }
            let mut mi = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    let pxy = joint[a][b] / n;
                    if pxy > 0.0 {
                        let px = (joint[a][0] + joint[a][1]) / n;
                        let py = (joint[0][b] + joint[1][b]) / n;
                        mi += pxy * (pxy / (px * py)).ln();
                    }
                }
            }
            assert!(mi > 0.05, "cohort {cohort} signal too weak: MI = {mi:.4}");
        }
    }

    #[test]
    fn strip_removes_exactly_identifier_codes() {
        let (records, truth) = generate(&small_config()).unwrap();
        let stripped = strip_identifiers(&records, &truth, 0);
        let banned: HashSet<&String> = truth.identifier_codes.values().flatten().collect();

        let before: HashSet<String> =
            records.iter().flat_map(|r| r.codes().map(String::from)).collect();
        let after: HashSet<String> =
            stripped.iter().flat_map(|r| r.codes().map(String::from)).collect();
        let removed: HashSet<&String> = before.difference(&after).map(|c| c).collect();
        assert!(removed.iter().all(|c| banned.contains(*c)));
        assert!(after.iter().all(|c| !banned.contains(c)));
    }

    #[test]
    fn strip_with_empty_identifier_lists_is_identity() {
        let (records, mut truth) = generate(&small_config()).unwrap();
        for codes in truth.identifier_codes.values_mut() {
            codes.clear();
        }
        assert_eq!(strip_identifiers(&records, &truth, 0), records);
    }

    #[test]
    fn strip_drops_patient_below_threshold() {
        let (records, truth) = generate(&small_config()).unwrap();
        // a threshold nobody survives
        let stripped = strip_identifiers(&records, &truth, 10_000);
        assert!(stripped.is_empty());
    }

    #[test]
    fn truth_round_trips_through_json() {
        let (_, truth) = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.save(&path).unwrap();
        assert_eq!(GroundTruth::load(&path).unwrap(), truth);
    }
}
