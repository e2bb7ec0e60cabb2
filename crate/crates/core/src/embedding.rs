//! Code embeddings trained from patient event sequences.
//!
//! Each patient's time-ordered events form a "paragraph"; codes that
//! appear in similar contexts get nearby vectors. Context windows can
//! adapt to the code's within-record frequency, so conditions that
//! recur throughout a record (chronic) get a wider scope than one-off
//! (acute) events. The trained objective is skip-gram with negative
//! sampling; a bag-of-words mode is available behind a flag.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{PatientRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::Real;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    /// Embedding dimension.
    pub dim: usize,
    /// Window length for fixed mode, and the constant offset in
    /// adaptive mode.
    pub base_window: usize,
    /// Extra window positions granted per within-record occurrence.
    pub freq_scale: f64,
    /// Adapt the window to within-record frequency instead of using
    /// `base_window` everywhere.
    pub adaptive: bool,
    /// Negative samples drawn per positive pair.
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Codes with fewer corpus occurrences are left untrained.
    pub min_count: usize,
    /// Train continuous bag-of-words instead of skip-gram.
    pub cbow: bool,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 50,
            base_window: 20,
            freq_scale: 0.5,
            adaptive: true,
            negatives: 5,
            epochs: 5,
            learning_rate: 0.025,
            min_count: 5,
            cbow: false,
            seed: 1,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if self.base_window == 0 {
            return Err(Error::Config("base window must be at least 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("need at least one negative sample".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One vector per vocabulary code. The context table only matters
/// during training and is not persisted.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F: Scalar = Real> {
    pub vocabulary: Vocabulary,
    /// V x d input vectors, the embedding proper.
    pub vectors: Array2<F>,
    /// V x d output-side vectors.
    pub context_vectors: Array2<F>,
}

impl<F: Scalar> EmbeddingTable<F> {
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vector(&self, code: &str) -> Option<ArrayView1<'_, F>> {
        self.vocabulary.index_of(code).map(|i| self.vectors.row(i))
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<F> {
        let (va, vb) = (self.vector(a)?, self.vector(b)?);
        let dot = va.dot(&vb);
        let na = va.dot(&va).sqrt();
        let nb = vb.dot(&vb).sqrt();
        if na == F::zero() || nb == F::zero() {
            return None;
        }
        Some(dot / (na * nb))
    }
}

fn window_len(occurrences: usize, config: &EmbeddingConfig) -> usize {
    let raw = occurrences as f64 * config.freq_scale + config.base_window as f64;
    raw.round().max(1.0) as usize
}

/// Window length for one code within one record: the code's occurrence
/// count scaled by `freq_scale` plus `base_window`, rounded, at least 1.
/// Frequent (chronic) codes therefore get wider context than rare ones.
pub fn adaptive_window_length(
    code: &str,
    record: &PatientRecord,
    config: &EmbeddingConfig,
) -> Result<usize> {
    let occurrences = record.codes().filter(|c| *c == code).count();
    if occurrences == 0 {
        return Err(Error::InvalidInput(format!(
            "code `{code}` does not occur in record `{}`",
            record.patient_id
        )));
    }
    Ok(window_len(occurrences, config))
}

/// Emits every (center, context) code pair within the window around
/// each event position. In adaptive mode the window is per-code, so the
/// relation is not symmetric; in fixed mode it is.
pub fn build_training_pairs(
    records: &[PatientRecord],
    config: &EmbeddingConfig,
) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    for record in records {
        let seq: Vec<&str> = record.codes().collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for &code in &seq {
            *counts.entry(code).or_default() += 1;
        }
        for t in 0..seq.len() {
            let window = if config.adaptive {
                window_len(counts[seq[t]], config)
            } else {
                config.base_window
            };
            let lo = t.saturating_sub(window);
            let hi = (t + window).min(seq.len().saturating_sub(1));
            for s in lo..=hi {
                if s != t {
                    pairs.push((seq[t].to_string(), seq[s].to_string()));
                }
            }
        }
    }
    pairs
}

/// Loss of one training example with fixed negative draws:
/// `-ln s(u.v+) - sum_neg ln s(-u.v-)` with `s` the logistic function.
pub fn negative_sampling_loss<F: Scalar>(center: &[F], positive: &[F], negatives: &[&[F]]) -> F {
    let dot = |a: &[F], b: &[F]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<F>();
    let mut loss = -sigmoid(dot(center, positive)).ln();
    for neg in negatives {
        loss -= sigmoid(-dot(center, neg)).ln();
    }
    loss
}

/// Analytic gradients of [`negative_sampling_loss`] with respect to the
/// center vector, the positive context vector and each negative one.
pub fn negative_sampling_gradients<F: Scalar>(
    center: &[F],
    positive: &[F],
    negatives: &[&[F]],
) -> (Vec<F>, Vec<F>, Vec<Vec<F>>) {
    let dot = |a: &[F], b: &[F]| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<F>();
    let mut grad_center = vec![F::zero(); center.len()];
    let residual_pos = sigmoid(dot(center, positive)) - F::one();
    let grad_positive: Vec<F> = center.iter().map(|&u| residual_pos * u).collect();
    for (g, &v) in grad_center.iter_mut().zip(positive) {
        *g += residual_pos * v;
    }
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for neg in negatives {
        let residual = sigmoid(dot(center, neg));
        grad_negatives.push(center.iter().map(|&u| residual * u).collect::<Vec<F>>());
        for (g, &v) in grad_center.iter_mut().zip(*neg) {
            *g += residual * v;
        }
    }
    (grad_center, grad_positive, grad_negatives)
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

struct Corpus {
    /// Vocabulary-index sequences, one per record, rare codes removed.
    sequences: Vec<Vec<u32>>,
    /// Per-position window lengths matching `sequences`.
    windows: Vec<Vec<u32>>,
    /// Corpus occurrence count per vocabulary index.
    counts: Vec<usize>,
    total_pairs: usize,
}

fn build_corpus(
    records: &[PatientRecord],
    vocabulary: &Vocabulary,
    config: &EmbeddingConfig,
) -> Corpus {
    let mut raw: Vec<Vec<u32>> = records
        .iter()
        .map(|r| {
            r.codes()
                .filter_map(|c| vocabulary.index_of(c))
                .map(|i| i as u32)
                .collect()
        })
        .collect();

    let mut counts = vec![0usize; vocabulary.len()];
    for seq in &raw {
        for &i in seq {
            counts[i as usize] += 1;
        }
    }
    for seq in &mut raw {
        seq.retain(|&i| counts[i as usize] >= config.min_count);
    }
    // counts over what is actually trained on
    counts.fill(0);
    for seq in &raw {
        for &i in seq {
            counts[i as usize] += 1;
        }
    }

    let mut windows = Vec::with_capacity(raw.len());
    let mut total_pairs = 0usize;
    for seq in &raw {
        let mut local: HashMap<u32, usize> = HashMap::new();
        for &i in seq {
            *local.entry(i).or_default() += 1;
        }
        let w: Vec<u32> = (0..seq.len())
            .map(|t| {
                let window = if config.adaptive {
                    window_len(local[&seq[t]], config)
                } else {
                    config.base_window
                };
                let lo = t.saturating_sub(window);
                let hi = (t + window).min(seq.len() - 1);
                total_pairs += hi - lo;
                window as u32
            })
            .collect();
        windows.push(w);
    }

    Corpus {
        sequences: raw,
        windows,
        counts,
        total_pairs,
    }
}

/// Trains the embedding by stochastic gradient steps on the
/// negative-sampling objective, negatives drawn from the unigram
/// distribution raised to 3/4. Single-threaded and deterministic for a
/// given seed.
pub fn train_embeddings<F: Scalar>(
    records: &[PatientRecord],
    vocabulary: &Vocabulary,
    config: &EmbeddingConfig,
) -> Result<EmbeddingTable<F>> {
    config.validate()?;
    if vocabulary.is_empty() {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("empty corpus".into()));
    }

    let v = vocabulary.len();
    let d = config.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut input: Vec<F> = Vec::with_capacity(v * d);
    for _ in 0..v * d {
        input.push(F::of((rng.gen::<f64>() - 0.5) / d as f64));
    }
    let mut context: Vec<F> = vec![F::zero(); v * d];

    let corpus = build_corpus(records, vocabulary, config);
    let trainable = corpus.counts.iter().any(|&c| c > 0);

    if config.epochs > 0 && trainable && corpus.total_pairs > 0 {
        let table = WeightedIndex::new(
            corpus
                .counts
                .iter()
                .map(|&c| if c > 0 { (c as f64).powf(0.75) } else { 0.0 }),
        )
        .map_err(|e| Error::InvalidInput(format!("negative-sampling table: {e}")))?;

        let total_updates = (corpus.total_pairs * config.epochs) as f64;
        let mut processed = 0usize;
        let mut grad_scratch = vec![F::zero(); d];

        for _epoch in 0..config.epochs {
            for (seq, windows) in corpus.sequences.iter().zip(&corpus.windows) {
                for t in 0..seq.len() {
                    let window = windows[t] as usize;
                    let lo = t.saturating_sub(window);
                    let hi = (t + window).min(seq.len() - 1);
                    if lo == hi {
                        continue;
                    }

                    if config.cbow {
                        let lr = F::of(decayed_lr(config.learning_rate, processed, total_updates));
                        cbow_update(
                            &mut input,
                            &mut context,
                            seq,
                            t,
                            lo,
                            hi,
                            d,
                            config.negatives,
                            lr,
                            &table,
                            &mut rng,
                            &mut grad_scratch,
                        )?;
                        processed += hi - lo;
                    } else {
                        for s in lo..=hi {
                            if s == t {
                                continue;
                            }
                            let lr =
                                F::of(decayed_lr(config.learning_rate, processed, total_updates));
                            skipgram_update(
                                &mut input,
                                &mut context,
                                seq[t] as usize,
                                seq[s] as usize,
                                d,
                                config.negatives,
                                lr,
                                &table,
                                &mut rng,
                                &mut grad_scratch,
                            )?;
                            processed += 1;
                        }
                    }
                }
            }
        }

        if input.iter().chain(context.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Diverged(
                "non-finite embedding parameter after training".into(),
            ));
        }
    }

    Ok(EmbeddingTable {
        vocabulary: vocabulary.clone(),
        vectors: Array2::from_shape_vec((v, d), input).expect("embedding shape"),
        context_vectors: Array2::from_shape_vec((v, d), context).expect("embedding shape"),
    })
}

/// Linear decay to 1% of the initial rate over all scheduled updates.
fn decayed_lr(base: f64, processed: usize, total: f64) -> f64 {
    base * (1.0 - processed as f64 / total).max(0.01)
}

fn draw_negatives<R: Rng>(
    table: &WeightedIndex<f64>,
    rng: &mut R,
    count: usize,
    forbidden: usize,
    out: &mut Vec<usize>,
) {
    out.clear();
    for _ in 0..count {
        for _ in 0..8 {
            let candidate = table.sample(rng);
            if candidate != forbidden {
                out.push(candidate);
                break;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn skipgram_update<F: Scalar, R: Rng>(
    input: &mut [F],
    context: &mut [F],
    center: usize,
    positive: usize,
    d: usize,
    negatives: usize,
    lr: F,
    table: &WeightedIndex<f64>,
    rng: &mut R,
    grad_center: &mut [F],
) -> Result<()> {
    let mut negs = Vec::with_capacity(negatives);
    draw_negatives(table, rng, negatives, positive, &mut negs);

    grad_center.fill(F::zero());
    let u_off = center * d;
    for (target, label) in
        std::iter::once((positive, F::one())).chain(negs.iter().map(|&n| (n, F::zero())))
    {
        let v_off = target * d;
        let mut dot = F::zero();
        for k in 0..d {
            dot += input[u_off + k] * context[v_off + k];
        }
        let g = (label - sigmoid(dot)) * lr;
        if !g.is_finite() {
            return Err(Error::Diverged(
                "non-finite gradient in negative sampling".into(),
            ));
        }
        for k in 0..d {
            grad_center[k] += g * context[v_off + k];
            context[v_off + k] += g * input[u_off + k];
        }
    }
    for k in 0..d {
        input[u_off + k] += grad_center[k];
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cbow_update<F: Scalar, R: Rng>(
    input: &mut [F],
    context: &mut [F],
    seq: &[u32],
    t: usize,
    lo: usize,
    hi: usize,
    d: usize,
    negatives: usize,
    lr: F,
    table: &WeightedIndex<f64>,
    rng: &mut R,
    grad_hidden: &mut [F],
) -> Result<()> {
    let center = seq[t] as usize;
    let mut hidden = vec![F::zero(); d];
    let mut n_ctx = 0usize;
    for s in lo..=hi {
        if s == t {
            continue;
        }
        let off = seq[s] as usize * d;
        for k in 0..d {
            hidden[k] += input[off + k];
        }
        n_ctx += 1;
    }
    let scale = F::of(1.0 / n_ctx as f64);
    for h in hidden.iter_mut() {
        *h *= scale;
    }

    let mut negs = Vec::with_capacity(negatives);
    draw_negatives(table, rng, negatives, center, &mut negs);

    grad_hidden.fill(F::zero());
    for (target, label) in
        std::iter::once((center, F::one())).chain(negs.iter().map(|&n| (n, F::zero())))
    {
        let v_off = target * d;
        let mut dot = F::zero();
        for k in 0..d {
            dot += hidden[k] * context[v_off + k];
        }
        let g = (label - sigmoid(dot)) * lr;
        if !g.is_finite() {
            return Err(Error::Diverged(
                "non-finite gradient in negative sampling".into(),
            ));
        }
        for k in 0..d {
            grad_hidden[k] += g * context[v_off + k];
            context[v_off + k] += g * hidden[k];
        }
    }
    for s in lo..=hi {
        if s == t {
            continue;
        }
        let off = seq[s] as usize * d;
        for k in 0..d {
            input[off + k] += grad_hidden[k];
        }
    }
    Ok(())
}

/// Writes `V d` then one `code v1 .. vd` line per vocabulary entry.
pub fn save_embeddings<F: Scalar>(table: &EmbeddingTable<F>, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    writeln!(writer, "{} {}", table.vocabulary.len(), table.dim())?;
    for (i, code) in table.vocabulary.codes().iter().enumerate() {
        write!(writer, "{code}")?;
        for value in table.vectors.row(i) {
            write!(writer, " {value}")?;
        }
        writeln!(writer)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads the [`save_embeddings`] format. The vocabulary is rebuilt from
/// the file, so counts are zero; context vectors start at zero.
pub fn load_embeddings<F: Scalar>(path: impl AsRef<Path>) -> Result<EmbeddingTable<F>> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::Format("missing embedding header".into()))??;
    let mut parts = header.split_whitespace();
    let v: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad vocabulary size in header".into()))?;
    let d: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad dimension in header".into()))?;

    let mut codes = Vec::with_capacity(v);
    let mut data: Vec<F> = Vec::with_capacity(v * d);
    let mut rows = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows += 1;
        if rows > v {
            return Err(Error::Format(format!(
                "header declares {v} rows but the file has more"
            )));
        }
        let mut parts = line.split_whitespace();
        let code = parts
            .next()
            .ok_or_else(|| Error::Format(format!("row {rows}: missing code")))?;
        codes.push(code.to_string());
        let before = data.len();
        for token in parts {
            let value: f64 = token
                .parse()
                .map_err(|_| Error::Format(format!("row {rows}: bad number `{token}`")))?;
            data.push(F::of(value));
        }
        if data.len() - before != d {
            return Err(Error::Format(format!(
                "row {rows}: expected {d} values, found {}",
                data.len() - before
            )));
        }
    }
    if rows != v {
        return Err(Error::Format(format!(
            "header declares {v} rows but the file has {rows}"
        )));
    }

    Ok(EmbeddingTable {
        vocabulary: Vocabulary::from_codes(codes),
        vectors: Array2::from_shape_vec((v, d), data).map_err(|e| Error::Format(e.to_string()))?,
        context_vectors: Array2::zeros((v, d)),
    })
}
