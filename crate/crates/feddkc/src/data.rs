//! Dataset ingestion, synthetic generation, and heterogeneity-controlled
//! partitioning.
//!
//! CSV layout: a header line `d,C` (feature count, class count), then one
//! row per sample with `d` floats and a trailing integer label in [0, C).
//! Lines that are empty or start with `#` are skipped.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows selected by index, in the given order.
    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            name: name.to_string(),
        }
    }

    /// Seeded shuffle-split into (train, test) by held-out fraction.
    pub fn split_test(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidConfig {
                field: "dataset.test_fraction".into(),
                msg: format!("must be in [0, 1), got {test_fraction}"),
            });
        }
        let mut indices: Vec<usize> = (0..self.len()).collect();
        let mut rng = seeding::rng_for(seed, "test-split", 0);
        indices.shuffle(&mut rng);
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test_idx, train_idx) = indices.split_at(n_test);
        Ok((
            self.subset(train_idx, &format!("{}-train", self.name)),
            self.subset(test_idx, &format!("{}-test", self.name)),
        ))
    }
}

/// Parses the dataset text format. `load_csv` adds file IO and per-column
/// standardization on top.
pub fn parse_dataset_csv(text: &str) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (header_line, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header line `d,C`".into(),
    })?;
    let mut parts = header.split(',').map(str::trim);
    let parse_header_field = |field: Option<&str>, what: &str| -> Result<usize> {
        field
            .ok_or_else(|| Error::Parse {
                line: header_line,
                msg: format!("header missing {what}"),
            })?
            .parse::<usize>()
            .map_err(|e| Error::Parse {
                line: header_line,
                msg: format!("bad {what}: {e}"),
            })
    };
    let dim = parse_header_field(parts.next(), "feature count d")?;
    let class_count = parse_header_field(parts.next(), "class count C")?;
    if parts.next().is_some() {
        return Err(Error::Parse {
            line: header_line,
            msg: "header must be exactly `d,C`".into(),
        });
    }
    if dim == 0 || class_count == 0 {
        return Err(Error::Parse {
            line: header_line,
            msg: format!("d and C must be positive (d = {dim}, C = {class_count})"),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line_no, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        for f in &fields[..dim] {
            let v: f64 = f.parse().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("bad feature `{f}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite feature {v}"),
                });
            }
            data.push(v);
        }
        let label: usize = fields[dim].parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad label `{}`: {e}", fields[dim]),
        })?;
        if label >= class_count {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("label {label} out of range for {class_count} classes"),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: header_line,
            msg: "no data rows".into(),
        });
    }
    let rows = labels.len();
    Ok(Dataset {
        features: Matrix::from_vec(rows, dim, data)?,
        labels,
        class_count,
        name: String::new(),
    })
}

/// Loads the CSV format and standardizes each feature column to zero mean
/// and unit variance (constant columns are left centered at zero).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut ds = parse_dataset_csv(&text)?;
    ds.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    standardize_columns(&mut ds.features);
    Ok(ds)
}

fn standardize_columns(features: &mut Matrix) {
    let (rows, cols) = (features.rows(), features.cols());
    for c in 0..cols {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += features.get(r, c);
        }
        mean /= rows as f64;
        let mut var = 0.0;
        for r in 0..rows {
            let d = features.get(r, c) - mean;
            var += d * d;
        }
        var /= rows as f64;
        let std = var.sqrt();
        let scale = if std > 1e-12 { 1.0 / std } else { 0.0 };
        for r in 0..rows {
            let v = (features.get(r, c) - mean) * scale;
            features.set(r, c, v);
        }
    }
}

/// Gaussian cluster per class: class centroids are standard normal in d
/// dimensions, samples add `spread`-scaled noise. Fully determined by the
/// seed; labels come out in class-block order.
pub fn synth_blobs(
    class_count: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if class_count == 0 || per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig {
            field: "dataset.synth".into(),
            msg: "class_count, per_class, and features must be positive".into(),
        });
    }
    if !(spread >= 0.0) {
        return Err(Error::InvalidConfig {
            field: "dataset.spread".into(),
            msg: format!("must be >= 0, got {spread}"),
        });
    }
    let mut rng = seeding::rng_for(seed, "synth-blobs", 0);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    let mut centroids = Vec::with_capacity(class_count);
    for _ in 0..class_count {
        let c: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        centroids.push(c);
    }

    let n = class_count * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (label, centroid) in centroids.iter().enumerate() {
        for _ in 0..per_class {
            for &c in centroid {
                data.push(c + spread * unit.sample(&mut rng));
            }
            labels.push(label);
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(n, dim, data)?,
        labels,
        class_count,
        name: format!("blobs-c{class_count}-n{per_class}-d{dim}"),
    })
}

/// Assignment of every sample to a client, produced by the label-skew
/// Dirichlet procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub alpha: f64,
    pub client_count: usize,
    pub seed: u64,
    /// Client id per sample index.
    pub assignment: Vec<usize>,
}

impl PartitionPlan {
    /// Index set of one client, in dataset order.
    pub fn client_indices(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| (c == client).then_some(i))
            .collect()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.client_count];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }
}

const PARTITION_ATTEMPTS: usize = 100;

/// For each class, draws client proportions from a symmetric Dirichlet(alpha)
/// and splits that class's samples accordingly (largest-remainder counts over
/// a seeded shuffle). Small alpha concentrates classes on few clients; large
/// alpha approaches a uniform split. Replans up to 100 times if some client
/// ends up empty.
pub fn dirichlet_partition(
    ds: &Dataset,
    client_count: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if client_count == 0 {
        return Err(Error::InvalidConfig {
            field: "partition.clients".into(),
            msg: "need at least one client".into(),
        });
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidConfig {
            field: "partition.alpha".into(),
            msg: format!("must be positive, got {alpha}"),
        });
    }
    if ds.len() < client_count {
        return Err(Error::PartitionFailure(format!(
            "{} samples cannot cover {client_count} clients",
            ds.len()
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &label) in ds.labels.iter().enumerate() {
        by_class[label].push(i);
    }

    for attempt in 0..PARTITION_ATTEMPTS {
        let mut rng = seeding::rng_for(seed, "dirichlet-partition", attempt as u64);
        let assignment = draw_assignment(&by_class, ds.len(), client_count, alpha, &mut rng);
        let mut sizes = vec![0usize; client_count];
        for &c in &assignment {
            sizes[c] += 1;
        }
        if sizes.iter().all(|&s| s > 0) {
            return Ok(PartitionPlan {
                alpha,
                client_count,
                seed,
                assignment,
            });
        }
    }
    Err(Error::PartitionFailure(format!(
        "some client stayed empty across {PARTITION_ATTEMPTS} attempts \
         (alpha = {alpha}, clients = {client_count}, n = {})",
        ds.len()
    )))
}

fn draw_assignment(
    by_class: &[Vec<usize>],
    total: usize,
    client_count: usize,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let mut assignment = vec![0usize; total];
    for class_indices in by_class {
        if class_indices.is_empty() {
            continue;
        }
        let mut indices = class_indices.clone();
        indices.shuffle(rng);

        // Symmetric Dirichlet via normalized Gamma draws.
        let mut weights: Vec<f64> = (0..client_count).map(|_| gamma.sample(rng)).collect();
        let mut sum: f64 = weights.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            // All-zero draws can happen for tiny alpha; fall back to a
            // single uniform pick so the class still lands somewhere.
            let lucky = rng.random_range(0..client_count);
            weights = vec![0.0; client_count];
            weights[lucky] = 1.0;
            sum = 1.0;
        }

        // Largest-remainder apportionment of the class count.
        let n = indices.len();
        let mut counts = vec![0usize; client_count];
        let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(client_count);
        let mut assigned = 0usize;
        for (k, w) in weights.iter().enumerate() {
            let exact = w / sum * n as f64;
            let floor = exact.floor() as usize;
            counts[k] = floor;
            assigned += floor;
            remainders.push((k, exact - floor as f64));
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (k, _) in remainders.into_iter().take(n - assigned) {
            counts[k] += 1;
        }

        let mut cursor = 0;
        for (k, &count) in counts.iter().enumerate() {
            for &sample in &indices[cursor..cursor + count] {
                assignment[sample] = k;
            }
            cursor += count;
        }
    }
    assignment
}
