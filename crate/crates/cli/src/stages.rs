//! The pipeline stages behind each subcommand. Every stage reads its
//! declared input files, writes its declared outputs, and recomputes
//! deterministic state (vocabularies, splits) from the config seed so
//! stages can be re-run in isolation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::{Array1, Array2};

use patsim_core::cluster::{
    kmeans, kmeans_from_similarity, seeded_kmeans, EvalReport, KMeansResult, PartitionPair,
};
use patsim_core::ehr::{
    filter_patients, filter_vocabulary, parse_events, stratified_split, write_events,
    EventFileFormat, PatientRecord, Vocabulary,
};
use patsim_core::embedding::{load_embeddings, save_embeddings, train_embeddings, EmbeddingTable};
use patsim_core::matcher::{build_cnn_similarity, train, MatcherModel};
use patsim_core::represent::{
    normalize_columns, read_matrices, to_one_hot, to_patient_matrix, to_summed_vector,
    write_matrices, PatientMatrix,
};
use patsim_core::similarity::{
    build_similarity_matrix, read_similarity_csv, write_similarity_csv, Measure, SimilarityMatrix,
};
use patsim_core::synth::{generate, strip_identifiers};
use patsim_core::Real;

use crate::config::PipelineConfig;

fn require(path: &Path, produced_by: &str) -> Result<()> {
    if !path.exists() {
        bail!(
            "missing input `{}` - run `patsim {produced_by}` first",
            path.display()
        );
    }
    Ok(())
}

fn event_format(config: &PipelineConfig) -> Result<EventFileFormat> {
    config
        .data
        .format
        .parse()
        .with_context(|| format!("config key `data.format`: unknown value `{}`", config.data.format))
}

fn load_records(config: &PipelineConfig) -> Result<Vec<PatientRecord>> {
    let path = config.events_path();
    require(&path, "synth")?;
    Ok(parse_events(&path, event_format(config)?)?)
}

fn load_table(config: &PipelineConfig) -> Result<EmbeddingTable<Real>> {
    let path = config.embeddings_path();
    require(&path, "embed")?;
    Ok(load_embeddings(&path)?)
}

/// Filters records against the embedding vocabulary and splits them,
/// both deterministic given the config.
fn prepared_splits(
    config: &PipelineConfig,
    vocabulary: &Vocabulary,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>)> {
    let records = load_records(config)?;
    let kept = filter_patients(&records, config.data.min_events, vocabulary);
    let [f_train, f_test, f_dev] = config.data.split;
    Ok(stratified_split(&kept, (f_train, f_test, f_dev), config.seed))
}

fn split_by_name<'a>(
    name: &str,
    splits: &'a (Vec<PatientRecord>, Vec<PatientRecord>, Vec<PatientRecord>),
) -> Result<Vec<&'a PatientRecord>> {
    let (train, test, dev) = splits;
    Ok(match name {
        "train" => train.iter().collect(),
        "test" => test.iter().collect(),
        "dev" => dev.iter().collect(),
        "all" => {
            let mut all: Vec<&PatientRecord> = train.iter().chain(test).chain(dev).collect();
            all.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
            all
        }
        other => bail!("config key `similarity.split`: unknown value `{other}`"),
    })
}

fn cohort_of(records: &[PatientRecord]) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for record in records {
        if let Some(cohort) = &record.cohort {
            map.insert(record.patient_id.clone(), cohort.clone());
        }
    }
    Ok(map)
}

pub fn cmd_synth(config: &PipelineConfig, strip: bool) -> Result<()> {
    let core = config.synth.to_core(config.seed);
    let (mut records, truth) = generate(&core)?;
    if strip {
        records = strip_identifiers(&records, &truth, config.data.min_events);
    }
    std::fs::create_dir_all(&config.out_dir)?;
    write_events(&records, config.events_path(), event_format(config)?)?;
    truth.save(config.truth_path())?;
    println!(
        "synth: {} patients, {} events -> {}",
        records.len(),
        records.iter().map(|r| r.event_count()).sum::<usize>(),
        config.events_path().display()
    );
    Ok(())
}

pub fn cmd_embed(config: &PipelineConfig) -> Result<()> {
    let records = load_records(config)?;
    let vocabulary = filter_vocabulary(
        &records,
        config.data.max_patient_frac,
        config.data.min_patient_count,
    );
    let kept = filter_patients(&records, config.data.min_events, &vocabulary);
    let table: EmbeddingTable<Real> =
        train_embeddings(&kept, &vocabulary, &config.embedding.to_core(config.seed))?;
    save_embeddings(&table, config.embeddings_path())?;
    println!(
        "embed: {} codes x {} dims -> {}",
        vocabulary.len(),
        table.dim(),
        config.embeddings_path().display()
    );
    Ok(())
}

pub fn cmd_represent(config: &PipelineConfig) -> Result<()> {
    let table = load_table(config)?;
    let records = load_records(config)?;
    let kept = filter_patients(&records, config.data.min_events, &table.vocabulary);

    let matrices: Vec<PatientMatrix<Real>> = match config.representation.kind.as_str() {
        "deep" => kept
            .iter()
            .map(|r| {
                let mut m = to_patient_matrix(r, &table)?;
                if config.representation.normalize {
                    normalize_columns(&mut m);
                }
                Ok(m)
            })
            .collect::<patsim_core::Result<_>>()?,
        "shallow" => kept
            .iter()
            .map(|r| {
                let v = to_summed_vector(r, &table)?;
                Ok(PatientMatrix {
                    patient_id: v.patient_id,
                    data: v.data.insert_axis(ndarray::Axis(1)),
                    visit_dates: Vec::new(),
                })
            })
            .collect::<patsim_core::Result<_>>()?,
        "onehot" => kept
            .iter()
            .map(|r| {
                let one_hot = to_one_hot(r, &table.vocabulary)?;
                let presence: Vec<Real> = one_hot
                    .data
                    .rows()
                    .into_iter()
                    .map(|row| Real::from(u8::from(row.iter().any(|&x| x > 0))))
                    .collect();
                Ok(PatientMatrix {
                    patient_id: one_hot.patient_id,
                    data: Array1::from_vec(presence).insert_axis(ndarray::Axis(1)),
                    visit_dates: Vec::new(),
                })
            })
            .collect::<patsim_core::Result<_>>()?,
        other => bail!("config key `representation.kind`: unknown value `{other}`"),
    };

    write_matrices(&matrices, config.represent_path())?;
    println!(
        "represent: {} patients as `{}` -> {}",
        matrices.len(),
        config.representation.kind,
        config.represent_path().display()
    );
    Ok(())
}

fn select_matrices(
    config: &PipelineConfig,
    split: &str,
) -> Result<(Vec<PatientMatrix<Real>>, Vec<String>)> {
    let table = load_table(config)?;
    require(&config.represent_path(), "represent")?;
    let all: Vec<PatientMatrix<Real>> = read_matrices(config.represent_path())?;
    let splits = prepared_splits(config, &table.vocabulary)?;
    let selected = split_by_name(split, &splits)?;
    let wanted: HashMap<&str, &PatientRecord> = selected
        .iter()
        .map(|r| (r.patient_id.as_str(), *r))
        .collect();

    let mut matrices = Vec::new();
    let mut cohorts = Vec::new();
    for matrix in all {
        if let Some(record) = wanted.get(matrix.patient_id.as_str()) {
            cohorts.push(record.cohort.clone().unwrap_or_default());
            matrices.push(matrix);
        }
    }
    if matrices.len() != selected.len() {
        bail!(
            "`{}` covers {} of the {} `{split}` patients - re-run `patsim represent`",
            config.represent_path().display(),
            matrices.len(),
            selected.len()
        );
    }
    Ok((matrices, cohorts))
}

pub fn cmd_train(config: &PipelineConfig) -> Result<()> {
    if config.representation.kind != "deep" {
        bail!("`patsim train` needs `representation.kind = \"deep\"`");
    }
    let (train_set, train_cohorts) = select_matrices(config, "train")?;
    let (dev_set, dev_cohorts) = select_matrices(config, "dev")?;
    if train_cohorts.iter().any(|c| c.is_empty()) {
        bail!("training requires cohort labels on every training patient");
    }
    let core = config.matcher.to_core(config.seed)?;
    let (model, summary) = train(&train_set, &train_cohorts, &dev_set, &dev_cohorts, &core)?;
    model.save(config.model_path())?;
    println!(
        "train: {} epochs, best dev loss {:.4} -> {}",
        summary.epochs_run,
        summary.best_dev_loss,
        config.model_path().display()
    );
    Ok(())
}

pub fn cmd_sim(config: &PipelineConfig) -> Result<()> {
    let measure: Measure = config
        .similarity
        .measure
        .parse()
        .with_context(|| format!("config key `similarity.measure`: `{}`", config.similarity.measure))?;
    let (matrices, _) = select_matrices(config, &config.similarity.split)?;

    let sim = match measure {
        Measure::Cnn => {
            require(&config.model_path(), "train")?;
            let model: MatcherModel<Real> = MatcherModel::load(config.model_path())?;
            build_cnn_similarity(&matrices, &model)
        }
        _ => build_similarity_matrix(&matrices, measure)?,
    };
    if sim.undefined_pairs > 0 {
        eprintln!(
            "warning: {} pairs had undefined similarity and were recorded as 0",
            sim.undefined_pairs
        );
    }
    write_similarity_csv(&sim, config.sim_path())?;
    println!(
        "sim: {} x {} `{measure}` matrix -> {}",
        sim.len(),
        sim.len(),
        config.sim_path().display()
    );
    Ok(())
}

fn chosen_k(config: &PipelineConfig, cohorts: &[String]) -> usize {
    if config.cluster.k > 0 {
        return config.cluster.k;
    }
    let mut distinct: Vec<&String> = cohorts.iter().filter(|c| !c.is_empty()).collect();
    distinct.sort();
    distinct.dedup();
    distinct.len().max(1)
}

fn run_clustering(
    config: &PipelineConfig,
    points: &Array2<Real>,
    cohorts: &[String],
) -> Result<KMeansResult<Real>> {
    let k = chosen_k(config, cohorts);
    match config.cluster.method.as_str() {
        "kmeans" => Ok(kmeans(points, k, config.seed, config.cluster.max_iters)?),
        "seeded" => {
            // pin a stratified fraction of each cohort, cohort order
            // fixed alphabetically
            let mut by_cohort: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, cohort) in cohorts.iter().enumerate() {
                if !cohort.is_empty() {
                    by_cohort.entry(cohort).or_default().push(i);
                }
            }
            if by_cohort.len() != k {
                bail!(
                    "seeded clustering needs labels for exactly k = {k} cohorts, found {}",
                    by_cohort.len()
                );
            }
            let mut labels: Vec<Option<usize>> = vec![None; cohorts.len()];
            for (cluster, (_, members)) in by_cohort.into_iter().enumerate() {
                let pinned = ((members.len() as f64 * config.cluster.seeded_frac).ceil() as usize)
                    .clamp(1, members.len());
                for &i in members.iter().take(pinned) {
                    labels[i] = Some(cluster);
                }
            }
            Ok(seeded_kmeans(points, k, &labels, config.cluster.max_iters)?)
        }
        other => bail!("config key `cluster.method`: unknown value `{other}`"),
    }
}

pub fn cmd_cluster(config: &PipelineConfig) -> Result<()> {
    let source = match config.cluster.source.as_str() {
        "auto" => {
            if config.representation.kind == "deep" {
                "sim"
            } else {
                "vectors"
            }
        }
        other => other,
    };

    let (ids, assignment) = match source {
        "sim" => {
            require(&config.sim_path(), "sim")?;
            let sim: SimilarityMatrix<Real> = read_similarity_csv(config.sim_path(), Measure::Rv)?;
            let records = load_records(config)?;
            let label_map = cohort_of(&records)?;
            let cohorts: Vec<String> = sim
                .ids
                .iter()
                .map(|id| label_map.get(id).cloned().unwrap_or_default())
                .collect();
            let k = chosen_k(config, &cohorts);
            let result = match config.cluster.method.as_str() {
                "kmeans" => kmeans_from_similarity(&sim, k, config.seed, config.cluster.max_iters)?,
                _ => run_clustering(config, &sim.scores, &cohorts)?,
            };
            (sim.ids, result.assignment)
        }
        "vectors" => {
            let (matrices, cohorts) = select_matrices(config, &config.similarity.split)?;
            let dim = matrices[0].data.nrows();
            let mut points = Array2::zeros((matrices.len(), dim));
            for (i, m) in matrices.iter().enumerate() {
                if m.n_visits() != 1 {
                    bail!(
                        "`{}` holds multi-column matrices; cluster from vectors needs the shallow \
                         or onehot representation",
                        config.represent_path().display()
                    );
                }
                points.row_mut(i).assign(&m.data.column(0));
            }
            let result = run_clustering(config, &points, &cohorts)?;
            let ids = matrices.into_iter().map(|m| m.patient_id).collect();
            (ids, result.assignment)
        }
        other => bail!("config key `cluster.source`: unknown value `{other}`"),
    };

    let file = File::create(config.clusters_path())?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "patient_id,cluster")?;
    for (id, cluster) in ids.iter().zip(&assignment) {
        writeln!(writer, "{id},{cluster}")?;
    }
    writer.flush()?;

    println!(
        "cluster: {} patients into {} groups -> {}",
        ids.len(),
        assignment.iter().collect::<HashSet<_>>().len(),
        config.clusters_path().display()
    );
    Ok(())
}

fn read_clusters(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let (id, cluster) = line
            .split_once(',')
            .with_context(|| format!("{}: bad line {}", path.display(), i + 1))?;
        rows.push((
            id.to_string(),
            cluster
                .trim()
                .parse()
                .with_context(|| format!("{}: bad cluster id on line {}", path.display(), i + 1))?,
        ));
    }
    Ok(rows)
}

pub fn cmd_eval(config: &PipelineConfig) -> Result<()> {
    require(&config.clusters_path(), "cluster")?;
    let clusters = read_clusters(&config.clusters_path())?;
    let records = load_records(config)?;
    let label_map = cohort_of(&records)?;

    let mut assignment = Vec::new();
    let mut cohorts = Vec::new();
    for (id, cluster) in &clusters {
        let cohort = label_map
            .get(id)
            .with_context(|| format!("patient `{id}` has no cohort label in the event file"))?;
        assignment.push(*cluster);
        cohorts.push(cohort.clone());
    }

    let k = assignment.iter().collect::<HashSet<_>>().len();
    let partition = PartitionPair::from_labels(&assignment, &cohorts)?;
    let report = EvalReport::from_partition(&partition, k, config.seed);

    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(config.report_path(), &text)?;
    println!(
        "eval: RI {:.4} purity {:.4} NMI {:.4} -> {}",
        report.rand_index,
        report.purity,
        report.nmi,
        config.report_path().display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Dim,
    Width,
    Maps,
}

impl std::str::FromStr for SweepParam {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dim" => Ok(SweepParam::Dim),
            "width" => Ok(SweepParam::Width),
            "maps" => Ok(SweepParam::Maps),
            _ => bail!("unknown sweep parameter `{s}` (expected dim, width or maps)"),
        }
    }
}

/// Runs the deep pipeline once per grid point, varying exactly one
/// hyperparameter and holding the rest at their configured values.
pub fn cmd_sweep(config: &PipelineConfig, param: SweepParam) -> Result<()> {
    require(&config.events_path(), "synth")?;
    let (name, grid) = match param {
        SweepParam::Dim => ("dim", config.sweep.dims.clone()),
        SweepParam::Width => ("width", config.sweep.widths.clone()),
        SweepParam::Maps => ("maps", config.sweep.maps.clone()),
    };

    let mut rows = Vec::new();
    for value in &grid {
        let mut point = config.clone();
        point.out_dir = config.out_dir.join(format!("sweep-{name}-{value}"));
        point.data.events = config.events_path().display().to_string();
        point.representation.kind = "deep".into();
        point.similarity.measure = "cnn".into();
        match param {
            SweepParam::Dim => point.embedding.dim = *value,
            SweepParam::Width => point.matcher.filter_width = *value,
            SweepParam::Maps => point.matcher.n_filters = *value,
        }
        std::fs::create_dir_all(&point.out_dir)?;

        cmd_embed(&point)?;
        cmd_represent(&point)?;
        cmd_train(&point)?;
        cmd_sim(&point)?;
        cmd_cluster(&point)?;
        cmd_eval(&point)?;

        let report: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(point.report_path())?)?;
        println!(
            "sweep {name} = {value}: RI {:.4} purity {:.4} NMI {:.4}",
            report.rand_index, report.purity, report.nmi
        );
        rows.push((*value, report));
    }

    let file = File::create(config.sweep_path())?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "param,value,rand_index,purity,nmi")?;
    for (value, report) in &rows {
        writeln!(
            writer,
            "{name},{value},{},{},{}",
            report.rand_index, report.purity, report.nmi
        )?;
    }
    writer.flush()?;
    println!("sweep: {} rows -> {}", rows.len(), config.sweep_path().display());
    Ok(())
}

/// Orders the most mutually similar correctly-clustered patients of a
/// cohort and counts consecutive event transitions across their
/// records, for external flow rendering.
pub fn cmd_pathways(config: &PipelineConfig, cohort: &str, top_k: usize) -> Result<()> {
    require(&config.sim_path(), "sim")?;
    require(&config.clusters_path(), "cluster")?;
    let sim: SimilarityMatrix<Real> = read_similarity_csv(config.sim_path(), Measure::Rv)?;
    let clusters: HashMap<String, usize> = read_clusters(&config.clusters_path())?
        .into_iter()
        .collect();
    let records = load_records(config)?;
    let label_map = cohort_of(&records)?;

    if !label_map.values().any(|c| c == cohort) {
        bail!("unknown cohort `{cohort}`");
    }

    // the cluster that captured most of this cohort
    let mut cluster_votes: HashMap<usize, usize> = HashMap::new();
    for (id, cluster) in &clusters {
        if label_map.get(id).map(String::as_str) == Some(cohort) {
            *cluster_votes.entry(*cluster).or_default() += 1;
        }
    }
    let majority = cluster_votes
        .iter()
        .max_by_key(|&(cluster, votes)| (*votes, std::cmp::Reverse(*cluster)))
        .map(|(cluster, _)| *cluster);

    // cohort members inside the majority cluster, ranked by their
    // total similarity to the rest of the group
    let mut members: Vec<usize> = sim
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| {
            label_map.get(*id).map(String::as_str) == Some(cohort)
                && clusters.get(*id).copied() == majority
        })
        .map(|(i, _)| i)
        .collect();
    let mutual = |i: usize, members: &[usize]| -> f64 {
        members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| sim.scores[(i, j)])
            .sum()
    };
    let scores: HashMap<usize, f64> = members
        .iter()
        .map(|&i| (i, mutual(i, &members)))
        .collect();
    members.sort_by(|a, b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then_with(|| sim.ids[*a].cmp(&sim.ids[*b]))
    });
    members.truncate(top_k);
    let selected: HashSet<&str> = members.iter().map(|&i| sim.ids[i].as_str()).collect();

    // consecutive event transitions over each selected record
    let mut transitions: BTreeMap<(String, String), u64> = BTreeMap::new();
    for record in &records {
        if !selected.contains(record.patient_id.as_str()) {
            continue;
        }
        let codes: Vec<&str> = record.codes().collect();
        for window in codes.windows(2) {
            *transitions
                .entry((window[0].to_string(), window[1].to_string()))
                .or_default() += 1;
        }
    }

    let mut rows: Vec<((String, String), u64)> = transitions.into_iter().collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let file = File::create(config.pathways_path())?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "source_code,target_code,count")?;
    for ((source, target), count) in &rows {
        writeln!(writer, "{source},{target},{count}")?;
    }
    writer.flush()?;
    println!(
        "pathways: {} patients, {} transitions -> {}",
        selected.len(),
        rows.len(),
        config.pathways_path().display()
    );
    Ok(())
}
