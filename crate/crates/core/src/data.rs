//! Synthetic traffic generation, CSV ingestion and client partitioning.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FeatureMatrix, LabeledBatch, ModelError};
use crate::rng::{stream, SimRng};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("{available} samples cannot give {clients} clients {min_samples} samples each")]
    TooSmall {
        available: usize,
        clients: usize,
        min_samples: usize,
    },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),
    #[error("no valid rows in {0}")]
    NoValidRows(PathBuf),
    #[error("found {found} distinct labels but only {expected} classes were requested")]
    TooManyLabels { found: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, DataError>;

// Stream labels for seed derivation.
const STREAM_SYNTH: u64 = 11;
const STREAM_SPLIT: u64 = 12;
const STREAM_PARTITION: u64 = 13;
const STREAM_CALIB: u64 = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        num_classes: usize,
        num_features: usize,
        samples_per_class: usize,
        class_separation: f64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Dirichlet { concentration: f64 },
    ByClassShards { shards_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub partition: PartitionSpec,
    pub calibration_fraction: f64,
    /// Share of the full dataset held out as the global test set.
    pub test_fraction: f64,
    /// Smallest client dataset after partitioning. `None` derives it from
    /// the training batch size.
    pub min_samples: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic {
                num_classes: 4,
                num_features: 20,
                samples_per_class: 2500,
                class_separation: DEFAULT_SEPARATION,
            },
            partition: PartitionSpec::Dirichlet { concentration: 0.3 },
            calibration_fraction: 0.1,
            test_fraction: 0.2,
            min_samples: None,
        }
    }
}

pub const DEFAULT_SEPARATION: f64 = 10.0;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::Synthetic {
                num_classes,
                num_features,
                samples_per_class,
                class_separation,
            } => {
                if *num_classes < 2 {
                    return Err(DataError::InvalidSpec("num_classes must be at least 2".into()));
                }
                if *num_features == 0 {
                    return Err(DataError::InvalidSpec("num_features must be positive".into()));
                }
                if *samples_per_class == 0 {
                    return Err(DataError::InvalidSpec("samples_per_class must be positive".into()));
                }
                if !(class_separation.is_finite() && *class_separation >= 0.0) {
                    return Err(DataError::InvalidSpec("class_separation must be non-negative".into()));
                }
            }
            DataSource::Csv { num_classes, .. } => {
                if matches!(num_classes, Some(k) if *k < 2) {
                    return Err(DataError::InvalidSpec("num_classes must be at least 2".into()));
                }
            }
        }
        match self.partition {
            PartitionSpec::Dirichlet { concentration } => {
                if !(concentration.is_finite() && concentration > 0.0) {
                    return Err(DataError::InvalidSpec("concentration must be positive".into()));
                }
            }
            PartitionSpec::ByClassShards { shards_per_client } => {
                if shards_per_client == 0 {
                    return Err(DataError::InvalidSpec("shards_per_client must be positive".into()));
                }
            }
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return Err(DataError::InvalidSpec("calibration_fraction must lie in [0, 1)".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(DataError::InvalidSpec("test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn min_samples_for(&self, batch_size: usize) -> usize {
        self.min_samples.unwrap_or_else(|| (2 * batch_size).max(64))
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: LabeledBatch,
    pub calibration: LabeledBatch,
}

impl ClientDataset {
    pub fn size(&self) -> usize {
        self.train.len() + self.calibration.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    /// Samples added to undersized clients from the global pool.
    pub resampled: usize,
    /// Samples left out because they did not fill a whole shard.
    pub dropped: usize,
}

/// Per-feature min-max scaling in place. A constant column becomes 0.5.
pub fn min_max_scale(data: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for c in 0..cols {
        let column = data.iter().skip(c).step_by(cols);
        let (lo, hi) = column.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        for v in data.iter_mut().skip(c).step_by(cols) {
            *v = if hi > lo { (*v - lo) / (hi - lo) } else { 0.5 };
        }
    }
}

/// Isotropic Gaussian class blobs around seeded points on a sphere of
/// radius `class_separation`, shuffled and min-max scaled to `[0, 1]`.
pub fn generate_synthetic(spec: &DatasetSpec, seed: u64) -> Result<LabeledBatch> {
    spec.validate()?;
    let DataSource::Synthetic {
        num_classes,
        num_features,
        samples_per_class,
        class_separation,
    } = spec.source
    else {
        return Err(DataError::InvalidSpec("source is not synthetic".into()));
    };
    let mut rng = stream(seed, &[STREAM_SYNTH]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..num_features).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| class_separation * x / norm).collect()
        })
        .collect();
    let n = num_classes * samples_per_class;
    let mut order: Vec<usize> = (0..n).map(|i| i / samples_per_class).collect();
    order.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * num_features);
    for &c in &order {
        for center in &centers[c] {
            let z: f64 = rng.sample(StandardNormal);
            data.push(center + z);
        }
    }
    min_max_scale(&mut data, num_features);
    Ok(LabeledBatch::new(
        FeatureMatrix::new(n, num_features, data)?,
        order,
        num_classes,
    )?)
}

/// Seeded IID split into (train, test).
pub fn train_test_split(data: &LabeledBatch, test_fraction: f64, seed: u64) -> Result<(LabeledBatch, LabeledBatch)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidSpec("test_fraction must lie in (0, 1)".into()));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, &[STREAM_SPLIT]));
    let n_test = ((data.len() as f64) * test_fraction).round() as usize;
    let n_test = n_test.clamp(1, data.len().saturating_sub(1).max(1));
    let (test, train) = idx.split_at(n_test);
    Ok((data.select(train), data.select(test)))
}

fn sample_dirichlet(concentration: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|g| g / total).collect()
    } else {
        // every draw underflowed: put all mass on one random client
        let mut out = vec![0.0; k];
        out[rng.random_range(0..k)] = 1.0;
        out
    }
}

fn split_client(
    data: &LabeledBatch,
    client_id: usize,
    mut indices: Vec<usize>,
    calibration_fraction: f64,
    seed: u64,
) -> ClientDataset {
    indices.shuffle(&mut stream(seed, &[STREAM_CALIB, client_id as u64]));
    let n_cal = ((indices.len() as f64) * calibration_fraction).floor() as usize;
    let n_cal = n_cal.min(indices.len().saturating_sub(1));
    let (cal, train) = indices.split_at(n_cal);
    ClientDataset {
        client_id,
        train: data.select(train),
        calibration: data.select(cal),
    }
}

/// Dirichlet label-skew partition.
///
/// Each class is divided among clients by a fresh Dirichlet draw. Clients
/// that end up below `min_samples` are topped up with samples drawn from
/// the whole pool (excluding ones they already hold), and the number of
/// such extra samples is reported.
pub fn dirichlet_partition(
    data: &LabeledBatch,
    num_clients: usize,
    concentration: f64,
    calibration_fraction: f64,
    min_samples: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 {
        return Err(DataError::InvalidSpec("num_clients must be positive".into()));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(DataError::InvalidSpec("concentration must be positive".into()));
    }
    if data.len() < num_clients * min_samples.max(1) {
        return Err(DataError::TooSmall {
            available: data.len(),
            clients: num_clients,
            min_samples,
        });
    }
    let mut rng = stream(seed, &[STREAM_PARTITION]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    if num_clients == 1 {
        assigned[0] = (0..data.len()).collect();
    } else {
        for members in by_class.iter_mut() {
            members.shuffle(&mut rng);
            let props = sample_dirichlet(concentration, num_clients, &mut rng);
            let n = members.len() as f64;
            let mut start = 0;
            let mut cum = 0.0;
            for (client, p) in props.iter().enumerate() {
                cum += p;
                let end = if client + 1 == num_clients {
                    members.len()
                } else {
                    ((cum * n).round() as usize).clamp(start, members.len())
                };
                assigned[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
    }

    let mut resampled = 0;
    for held in assigned.iter_mut() {
        if held.len() >= min_samples {
            continue;
        }
        let mut owned = vec![false; data.len()];
        for &i in held.iter() {
            owned[i] = true;
        }
        let mut pool: Vec<usize> = (0..data.len()).filter(|&i| !owned[i]).collect();
        pool.shuffle(&mut rng);
        let need = min_samples - held.len();
        held.extend_from_slice(&pool[..need]);
        resampled += need;
    }

    let clients = assigned
        .into_iter()
        .enumerate()
        .map(|(id, idx)| split_client(data, id, idx, calibration_fraction, seed))
        .collect();
    Ok(Partition {
        clients,
        resampled,
        dropped: 0,
    })
}

/// Sorts samples by label, cuts them into equal shards, and deals
/// `shards_per_client` shards to each client. Every client gets exactly
/// the same number of samples; the remainder is dropped and reported.
pub fn by_class_shards(
    data: &LabeledBatch,
    num_clients: usize,
    shards_per_client: usize,
    calibration_fraction: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 || shards_per_client == 0 {
        return Err(DataError::InvalidSpec(
            "num_clients and shards_per_client must be positive".into(),
        ));
    }
    let total_shards = num_clients * shards_per_client;
    let shard = data.len() / total_shards;
    if shard == 0 {
        return Err(DataError::TooSmall {
            available: data.len(),
            clients: num_clients,
            min_samples: shards_per_client,
        });
    }
    let mut rng = stream(seed, &[STREAM_PARTITION]);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| data.labels()[i]);
    let mut shard_ids: Vec<usize> = (0..total_shards).collect();
    shard_ids.shuffle(&mut rng);
    let clients = (0..num_clients)
        .map(|c| {
            let mine: Vec<usize> = shard_ids[c * shards_per_client..(c + 1) * shards_per_client]
                .iter()
                .flat_map(|&s| idx[s * shard..(s + 1) * shard].iter().copied())
                .collect();
            split_client(data, c, mine, calibration_fraction, seed)
        })
        .collect();
    Ok(Partition {
        clients,
        resampled: 0,
        dropped: data.len() - total_shards * shard,
    })
}

/// Partition according to `spec.partition`.
pub fn partition(
    data: &LabeledBatch,
    spec: &DatasetSpec,
    num_clients: usize,
    min_samples: usize,
    seed: u64,
) -> Result<Partition> {
    match spec.partition {
        PartitionSpec::Dirichlet { concentration } => dirichlet_partition(
            data,
            num_clients,
            concentration,
            spec.calibration_fraction,
            min_samples,
            seed,
        ),
        PartitionSpec::ByClassShards { shards_per_client } => {
            by_class_shards(data, num_clients, shards_per_client, spec.calibration_fraction, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number in the file; the header is line 1.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvDataset {
    pub batch: LabeledBatch,
    pub feature_names: Vec<String>,
    /// Label strings indexed by class id.
    pub label_names: Vec<String>,
    pub rejected: Vec<RejectedRow>,
}

/// Reads a headered numeric CSV. Labels get ids in order of first
/// appearance; every other column is a feature, min-max scaled.
pub fn load_csv(path: &Path, label_column: &str, num_classes: Option<usize>) -> Result<CsvDataset> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let csv_err = |source| DataError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_string()))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let width = feature_names.len();

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut label_names = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut rejected = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            rejected.push(RejectedRow {
                line,
                reason: format!("expected {} fields, found {}", header.len(), record.len()),
            });
            continue;
        }
        let mut row = Vec::with_capacity(width);
        let mut bad = None;
        for (i, field) in record.iter().enumerate() {
            if i == label_idx {
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    bad = Some(format!("column `{}` is not numeric: `{field}`", &header[i]));
                    break;
                }
            }
        }
        if let Some(reason) = bad {
            rejected.push(RejectedRow { line, reason });
            continue;
        }
        let label = &record[label_idx];
        let next = label_names.len();
        let id = *ids.entry(label.to_string()).or_insert_with(|| {
            label_names.push(label.to_string());
            next
        });
        labels.push(id);
        values.extend(row);
    }
    if labels.is_empty() {
        return Err(DataError::NoValidRows(path.to_path_buf()));
    }
    let classes = match num_classes {
        Some(k) if label_names.len() > k => {
            return Err(DataError::TooManyLabels {
                found: label_names.len(),
                expected: k,
            })
        }
        Some(k) => k,
        None => label_names.len().max(2),
    };
    min_max_scale(&mut values, width);
    let batch = LabeledBatch::new(FeatureMatrix::new(labels.len(), width, values)?, labels, classes)?;
    Ok(CsvDataset {
        batch,
        feature_names,
        label_names,
        rejected,
    })
}
