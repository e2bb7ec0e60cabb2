//! Pipeline configuration: one TOML document with a section per stage.
//! Every value has a default, so a missing file or a partial document
//! works; command-line flags override individual keys.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use patsim_core::embedding::EmbeddingConfig;
use patsim_core::matcher::MatcherConfig;
use patsim_core::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage derives its randomness from it.
    pub seed: u64,
    /// Output directory holding all stage artifacts.
    pub out_dir: PathBuf,
    pub synth: SynthSection,
    pub data: DataSection,
    pub embedding: EmbeddingSection,
    pub representation: RepresentationSection,
    pub similarity: SimilaritySection,
    pub matcher: MatcherSection,
    pub cluster: ClusterSection,
    pub sweep: SweepSection,
    pub pathways: PathwaysSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            out_dir: PathBuf::from("run"),
            synth: SynthSection::default(),
            data: DataSection::default(),
            embedding: EmbeddingSection::default(),
            representation: RepresentationSection::default(),
            similarity: SimilaritySection::default(),
            matcher: MatcherSection::default(),
            cluster: ClusterSection::default(),
            sweep: SweepSection::default(),
            pathways: PathwaysSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_cohorts: usize,
    pub patients_per_cohort: usize,
    pub vocab_size: usize,
    pub shared_vocab_frac: f64,
    pub cohort_specific_frac: f64,
    pub mean_events_per_patient: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub chronic_frac: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SynthConfig::default();
        SynthSection {
            n_cohorts: base.n_cohorts,
            patients_per_cohort: base.patients_per_cohort,
            vocab_size: base.vocab_size,
            shared_vocab_frac: base.shared_vocab_frac,
            cohort_specific_frac: base.cohort_specific_frac,
            mean_events_per_patient: base.mean_events_per_patient,
            visits_min: base.visits_per_patient_range.0,
            visits_max: base.visits_per_patient_range.1,
            chronic_frac: base.chronic_frac,
        }
    }
}

impl SynthSection {
    pub fn to_core(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_cohorts: self.n_cohorts,
            patients_per_cohort: self.patients_per_cohort,
            vocab_size: self.vocab_size,
            shared_vocab_frac: self.shared_vocab_frac,
            cohort_specific_frac: self.cohort_specific_frac,
            mean_events_per_patient: self.mean_events_per_patient,
            visits_per_patient_range: (self.visits_min, self.visits_max),
            chronic_frac: self.chronic_frac,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Event file to read; empty means `<out_dir>/events.jsonl`.
    pub events: String,
    pub format: String,
    pub min_events: usize,
    pub max_patient_frac: f64,
    pub min_patient_count: usize,
    /// Train/test/dev fractions, summing to 1.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            events: String::new(),
            format: "jsonl".into(),
            min_events: 40,
            max_patient_frac: 0.90,
            min_patient_count: 5,
            split: [0.45, 0.45, 0.10],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub dim: usize,
    pub base_window: usize,
    pub freq_scale: f64,
    pub adaptive: bool,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub min_count: usize,
    pub cbow: bool,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let base = EmbeddingConfig::default();
        EmbeddingSection {
            dim: base.dim,
            base_window: base.base_window,
            freq_scale: base.freq_scale,
            adaptive: base.adaptive,
            negatives: base.negatives,
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            min_count: base.min_count,
            cbow: base.cbow,
        }
    }
}

impl EmbeddingSection {
    pub fn to_core(&self, seed: u64) -> EmbeddingConfig {
        EmbeddingConfig {
            dim: self.dim,
            base_window: self.base_window,
            freq_scale: self.freq_scale,
            adaptive: self.adaptive,
            negatives: self.negatives,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            min_count: self.min_count,
            cbow: self.cbow,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepresentationSection {
    /// onehot | shallow | deep
    pub kind: String,
    /// L2-normalize matrix columns (deep only).
    pub normalize: bool,
}

impl Default for RepresentationSection {
    fn default() -> Self {
        RepresentationSection {
            kind: "deep".into(),
            normalize: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    /// rv | dcor | cnn
    pub measure: String,
    /// Which split the all-pairs matrix covers: train | test | dev | all.
    pub split: String,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection {
            measure: "cnn".into(),
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherSection {
    pub filter_width: usize,
    pub n_filters: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub minibatch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub pairs_per_epoch: usize,
    pub positive_ratio: f64,
    /// cross_entropy | square
    pub loss: String,
}

impl Default for MatcherSection {
    fn default() -> Self {
        let base = MatcherConfig::default();
        MatcherSection {
            filter_width: base.filter_width,
            n_filters: base.n_filters,
            hidden_size: base.hidden_size,
            dropout: base.dropout,
            learning_rate: base.learning_rate,
            minibatch: base.minibatch,
            max_epochs: base.max_epochs,
            patience: base.patience,
            pairs_per_epoch: base.pairs_per_epoch,
            positive_ratio: base.positive_ratio,
            loss: base.loss.to_string(),
        }
    }
}

impl MatcherSection {
    pub fn to_core(&self, seed: u64) -> Result<MatcherConfig> {
        Ok(MatcherConfig {
            filter_width: self.filter_width,
            n_filters: self.n_filters,
            hidden_size: self.hidden_size,
            dropout: self.dropout,
            learning_rate: self.learning_rate,
            minibatch: self.minibatch,
            max_epochs: self.max_epochs,
            patience: self.patience,
            pairs_per_epoch: self.pairs_per_epoch,
            positive_ratio: self.positive_ratio,
            loss: self.loss.parse().with_context(|| {
                format!("config key `matcher.loss`: unknown value `{}`", self.loss)
            })?,
            seed,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// 0 means "number of distinct cohorts in the labels".
    pub k: usize,
    /// kmeans | seeded
    pub method: String,
    /// Fraction of labeled points pinned per cohort in seeded mode.
    pub seeded_frac: f64,
    pub max_iters: usize,
    /// sim | vectors | auto (sim for deep representations, vectors otherwise)
    pub source: String,
}

impl Default for ClusterSection {
    fn default() -> Self {
        ClusterSection {
            k: 0,
            method: "kmeans".into(),
            seeded_frac: 0.1,
            max_iters: 100,
            source: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub dims: Vec<usize>,
    pub widths: Vec<usize>,
    pub maps: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            dims: vec![20, 30, 50, 200, 500],
            widths: vec![5, 10, 15, 20, 25],
            maps: vec![50, 100, 150, 200],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathwaysSection {
    pub top_k: usize,
}

impl Default for PathwaysSection {
    fn default() -> Self {
        PathwaysSection { top_k: 100 }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(PipelineConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config `{}`", path.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("cannot parse config `{}`", path.display()))
            }
        }
    }

    pub fn events_path(&self) -> PathBuf {
        if self.data.events.is_empty() {
            self.out_dir.join("events.jsonl")
        } else {
            PathBuf::from(&self.data.events)
        }
    }

    pub fn truth_path(&self) -> PathBuf {
        self.out_dir.join("truth.json")
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.out_dir.join("embeddings.txt")
    }

    pub fn represent_path(&self) -> PathBuf {
        self.out_dir.join("represent.txt")
    }

    pub fn sim_path(&self) -> PathBuf {
        self.out_dir.join("sim.csv")
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("matcher.txt")
    }

    pub fn clusters_path(&self) -> PathBuf {
        self.out_dir.join("clusters.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out_dir.join("report.json")
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.out_dir.join("sweep.csv")
    }

    pub fn pathways_path(&self) -> PathBuf {
        self.out_dir.join("pathways.csv")
    }
}
