//! Datasets, synthetic generation, non-IID client partitioning, and CSV I/O.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Labelled samples: `inputs[n, d]` with one class index per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "dataset inputs must be rank 2, got {:?}",
                inputs.shape()
            )));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidLabel {
                label,
                classes: class_count,
            });
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Rows at `indices`, in that order. `indices` must be non-empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::Empty("subset indices"));
        }
        let d = self.dim();
        let mut values = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            values.extend_from_slice(self.inputs.row(i));
        }
        Dataset::new(
            Tensor::new(vec![indices.len(), d], values)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
        )
    }

    /// Concatenates datasets with equal dimension and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or(Error::Empty("datasets to concatenate"))?;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.dim() != first.dim() || p.class_count != first.class_count {
                return Err(Error::ShapeMismatch(
                    "cannot concatenate datasets of different shape".into(),
                ));
            }
            values.extend_from_slice(p.inputs.values());
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(
            Tensor::new(vec![labels.len(), first.dim()], values)?,
            labels,
            first.class_count,
        )
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Gaussian blobs: one unit-covariance cluster per class, class means drawn
/// uniformly on a sphere of radius `separation`.
pub fn generate_synthetic(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArchitecture(
            "synthetic data needs >= 2 classes".into(),
        ));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::Empty("synthetic dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();

    let n = classes * per_class;
    let mut values = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                values.push((m + noise) as f32);
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], values)?, labels, classes)
}

/// Disjoint client shards of one dataset.
#[derive(Clone, Debug)]
pub struct Partition {
    shards: Vec<Dataset>,
    indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn shards(&self) -> &[Dataset] {
        &self.shards
    }

    /// Source-row indices of every shard.
    pub fn indices(&self) -> &[Vec<usize>] {
        &self.indices
    }

    pub fn client_count(&self) -> usize {
        self.shards.len()
    }

    pub fn from_shards(shards: Vec<Dataset>) -> Result<Self> {
        if shards.iter().any(Dataset::is_empty) || shards.is_empty() {
            return Err(Error::Empty("partition shard"));
        }
        let mut offset = 0;
        let indices = shards
            .iter()
            .map(|s| {
                let r = (offset..offset + s.len()).collect();
                offset += s.len();
                r
            })
            .collect();
        Ok(Self { shards, indices })
    }
}

const MAX_PARTITION_ATTEMPTS: usize = 10_000;

fn dirichlet(rng: &mut ChaCha8Rng, alpha: f64, k: usize) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        // Every draw underflowed (tiny alpha): the limit is a one-hot vector.
        let mut v = vec![0.0; k];
        v[rng.random_range(0..k)] = 1.0;
        v
    }
}

/// Label-skewed split: for each class, client shares are drawn from
/// `Dirichlet(alpha)`. Redraws until every client holds `min_per_client`
/// samples (at least one).
pub fn partition_dirichlet(
    ds: &Dataset,
    n_clients: usize,
    alpha: f64,
    min_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 {
        return Err(Error::InfeasiblePartition("n_clients must be >= 1".into()));
    }
    if alpha.is_nan() || alpha <= 0.0 {
        return Err(Error::InfeasiblePartition(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let min = min_per_client.max(1);
    if n_clients * min > ds.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{} samples cannot give {n_clients} clients {min} each",
            ds.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = ds.class_indices();
    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assigned = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let shares = dirichlet(&mut rng, alpha, n_clients);
            let mut cum = 0.0;
            let mut start = 0;
            for (client, share) in shares.iter().enumerate() {
                cum += share;
                let end = if client + 1 == n_clients {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).clamp(start, members.len())
                };
                assigned[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assigned.iter().all(|a| a.len() >= min) {
            // Mix classes within each shard so in-order minibatches are not
            // label-sorted.
            for shard in &mut assigned {
                shard.shuffle(&mut rng);
            }
            let shards = assigned
                .iter()
                .map(|idx| ds.subset(idx))
                .collect::<Result<Vec<_>>>()?;
            return Ok(Partition {
                shards,
                indices: assigned,
            });
        }
    }
    Err(Error::InfeasiblePartition(format!(
        "no draw in {MAX_PARTITION_ATTEMPTS} attempts gave every client >= {min} samples (alpha {alpha})"
    )))
}

/// Stratified split. The train size is `round(train_fraction * n)`, shared
/// out across classes by largest remainder, with every class keeping at
/// least one sample on each side.
pub fn train_test_split(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config {
            key: "train_fraction".into(),
            reason: format!("must lie in (0, 1), got {train_fraction}"),
        });
    }
    let by_class = ds.class_indices();
    for (class, members) in by_class.iter().enumerate() {
        if members.len() == 1 {
            return Err(Error::ClassTooSmall { class, count: 1 });
        }
    }

    let target = (train_fraction * ds.len() as f64).round() as usize;
    let exact: Vec<f64> = by_class
        .iter()
        .map(|m| train_fraction * m.len() as f64)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if remaining == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            remaining -= 1;
        }
    }
    for (t, m) in take.iter_mut().zip(&by_class) {
        if !m.is_empty() {
            *t = (*t).clamp(1, m.len() - 1);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (members, &t) in by_class.iter().zip(&take) {
        let mut members = members.clone();
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..t]);
        test.extend_from_slice(&members[t..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train)?, ds.subset(&test)?))
}

/// Reads a headered CSV. Every column except `label_column` is a feature;
/// the class count is `max(label) + 1`.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(0, "", e))?;
    let headers = reader.headers().map_err(|e| csv_error(1, "", e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::CsvParse {
            row: 1,
            column: label_column.to_string(),
            reason: "label column not found in header".into(),
        })?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::CsvParse {
            row: 1,
            column: label_column.to_string(),
            reason: "no feature columns".into(),
        });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header line.
        let row = i + 2;
        let record = record.map_err(|e| csv_error(row, "", e))?;
        if record.len() != headers.len() {
            return Err(Error::CsvParse {
                row,
                column: String::new(),
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let name = &headers[col];
            if col == label_idx {
                let label = field.parse::<usize>().map_err(|_| Error::CsvParse {
                    row,
                    column: name.to_string(),
                    reason: format!("label `{field}` is not a non-negative integer"),
                })?;
                labels.push(label);
            } else {
                let v = field.parse::<f32>().map_err(|_| Error::CsvParse {
                    row,
                    column: name.to_string(),
                    reason: format!("`{field}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::CsvParse {
                        row,
                        column: name.to_string(),
                        reason: format!("`{field}` is not finite"),
                    });
                }
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv has no data rows"));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![labels.len(), dim], values)?,
        labels,
        classes.max(2),
    )
}

fn csv_error(row: usize, column: &str, e: csv::Error) -> Error {
    if let csv::ErrorKind::Io(_) = e.kind() {
        return Error::Io(std::io::Error::other(e.to_string()));
    }
    Error::CsvParse {
        row,
        column: column.to_string(),
        reason: e.to_string(),
    }
}

/// Writes features as `f0..f{d-1}` followed by `label_column`. Values use the
/// shortest representation that reads back to the same `f32`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(|e| csv_error(0, "", e))?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    header.push(label_column.to_string());
    w.write_record(&header).map_err(|e| csv_error(1, "", e))?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.inputs.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(ds.labels[r].to_string());
        w.write_record(&rec).map_err(|e| csv_error(r + 2, "", e))?;
    }
    w.flush()?;
    Ok(())
}
