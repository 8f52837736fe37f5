//! Datasets, splits, synthetic generators, sample dumps and run configuration.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AmcError, Result};
use crate::kernels::{Provenance, SampleBatch};
use crate::tensor::Tensor;

/// Per-feature statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero variance; these are centred but not rescaled.
    pub constant_columns: Vec<usize>,
}

impl Standardization {
    pub fn fit(features: &Tensor) -> Self {
        let (n, d) = (features.rows(), features.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        let mut constant_columns = Vec::new();
        for j in 0..d {
            let m = (0..n).map(|i| features.get(i, j)).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (features.get(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = v.sqrt();
            if !(std[j] > 0.0) {
                constant_columns.push(j);
            }
        }
        Self {
            mean,
            std,
            constant_columns,
        }
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let mut out = features.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v -= self.mean[j];
                if self.std[j] > 0.0 {
                    *v /= self.std[j];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    /// `N x d`.
    pub features: Tensor,
    /// 0/1 labels.
    pub labels: Vec<f64>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<f64>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(AmcError::dimension(
                "dataset",
                &[labels.len(), features.cols()],
                features.shape(),
            ));
        }
        if !features.all_finite() {
            return Err(AmcError::NonFinite("dataset features contain NaN or infinity".into()));
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(AmcError::Config("labels must be 0 or 1".into()));
        }
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Ok(Self {
            name: name.into(),
            feature_names,
            features,
            labels,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.features.row(i)).collect();
        let features = if rows.is_empty() {
            Tensor::zeros(&[0, self.dim()])
        } else {
            Tensor::from_rows(&rows)?
        };
        Ok(Self {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            standardization: self.standardization.clone(),
        })
    }

    /// Writes `feature columns..., label` with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.feature_names.clone();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Skip rows with empty cells or a wrong number of fields.
    #[default]
    Drop,
    Error,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub dropped_rows: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim(), "" | "NA" | "na" | "NaN" | "nan" | "?")
}

/// Parses a CSV with a header row. Labels coded `{-1, +1}` are mapped to `{0, 1}` (`-1 -> 0`).
pub fn read_csv<R: Read>(
    input: R,
    name: &str,
    label_column: &str,
    policy: MissingPolicy,
) -> Result<LoadReport> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_at = header.iter().position(|h| h == label_column).ok_or_else(|| {
        AmcError::Config(format!("label column '{label_column}' not found in {header:?}"))
    })?;
    let width = header.len();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dropped = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // data rows are numbered from 1, after the header
        let row = r + 1;
        let malformed = record.len() != width || record.iter().any(is_missing);
        if malformed {
            match policy {
                MissingPolicy::Drop => {
                    dropped += 1;
                    continue;
                }
                MissingPolicy::Error => {
                    return Err(AmcError::Parse {
                        row,
                        column: header.get(record.len().min(width - 1)).cloned().unwrap_or_default(),
                        message: "missing value".into(),
                    })
                }
            }
        }
        let mut features = Vec::with_capacity(width - 1);
        let mut label = 0.0;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| AmcError::Parse {
                row,
                column: header[c].clone(),
                message: format!("cannot parse '{cell}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(AmcError::Parse {
                    row,
                    column: header[c].clone(),
                    message: "value is not finite".into(),
                });
            }
            if c == label_at {
                label = v;
            } else {
                features.push(v);
            }
        }
        rows.push(features);
        labels.push(label);
    }
    let distinct: BTreeSet<i64> = labels.iter().map(|&y| y as i64).collect();
    if labels.iter().any(|&y| y.fract() != 0.0) {
        return Err(AmcError::Config("labels must be integers".into()));
    }
    let remap_minus_one = distinct.contains(&-1);
    for y in labels.iter_mut() {
        if remap_minus_one && *y == -1.0 {
            *y = 0.0;
        }
        if *y != 0.0 && *y != 1.0 {
            return Err(AmcError::Config(format!("labels must be binary, found {distinct:?}")));
        }
    }
    let features = if rows.is_empty() {
        Tensor::zeros(&[0, width - 1])
    } else {
        Tensor::from_rows(&rows)?
    };
    let mut dataset = Dataset::new(name, features, labels)?;
    dataset.feature_names = header
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label_at)
        .map(|(_, h)| h.clone())
        .collect();
    Ok(LoadReport {
        dataset,
        dropped_rows: dropped,
    })
}

pub fn load_csv(path: &Path, label_column: &str) -> Result<LoadReport> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    read_csv(std::fs::File::open(path)?, &name, label_column, MissingPolicy::Drop)
}

/// Seeded random split; both halves are standardised with statistics of the training half.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(AmcError::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(AmcError::Config(format!(
            "splitting {n} rows with fraction {test_fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = idx.split_at(n_test);
    let mut train = dataset.subset(train_idx)?;
    let mut test = dataset.subset(test_idx)?;
    let stats = Standardization::fit(&train.features);
    train.features = stats.apply(&train.features);
    test.features = stats.apply(&test.features);
    train.standardization = Some(stats.clone());
    test.standardization = Some(stats);
    Ok((train, test))
}

/// Indices of the test rows chosen by [`split`] for `seed`.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Vec<usize> {
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx[..n_test.min(n)].to_vec();
    test.sort_unstable();
    test
}

/// Two interleaving half circles with Gaussian jitter; classes alternate so they are balanced.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (x, y, label) = if i % 2 == 0 {
            (t.cos(), t.sin(), 0.0)
        } else {
            (1.0 - t.cos(), 0.5 - t.sin(), 1.0)
        };
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        rows.push([x + noise * jx, y + noise * jy]);
        labels.push(label);
    }
    let mut d = Dataset::new("two_moons", Tensor::from_rows(&rows)?, labels)?;
    d.feature_names = vec!["x0".into(), "x1".into()];
    Ok(d)
}

/// Observations `x = z W + b + noise_std * e` with `z ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianData {
    /// `N x obs_dim`.
    pub x: Tensor,
    /// `latent_dim x obs_dim`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub noise_std: f64,
}

pub fn linear_gaussian(
    n: usize,
    latent_dim: usize,
    obs_dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<LinearGaussianData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let weight = Tensor::matrix(
        latent_dim,
        obs_dim,
        (0..latent_dim * obs_dim).map(|_| normal()).collect(),
    )?;
    let bias: Vec<f64> = (0..obs_dim).map(|_| 0.5 * normal()).collect();
    let mut x = Vec::with_capacity(n * obs_dim);
    for _ in 0..n {
        let z: Vec<f64> = (0..latent_dim).map(|_| normal()).collect();
        for j in 0..obs_dim {
            let mean: f64 = (0..latent_dim).map(|i| z[i] * weight.get(i, j)).sum::<f64>() + bias[j];
            x.push(mean + noise_std * normal());
        }
    }
    Ok(LinearGaussianData {
        x: Tensor::matrix(n, obs_dim, x)?,
        weight,
        bias,
        noise_std,
    })
}

/// Writes one particle per row under a `z0, z1, ...` header.
pub fn write_samples_csv<W: Write>(batch: &SampleBatch, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..batch.dim()).map(|j| format!("z{j}")))?;
    for z in batch.iter() {
        w.write_record(z.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_samples(batch: &SampleBatch, path: &Path) -> Result<()> {
    write_samples_csv(batch, std::fs::File::create(path)?)
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<SampleBatch> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.trim().parse::<f64>().map_err(|_| AmcError::Parse {
                    row: r + 1,
                    column: header.get(c).unwrap_or("").to_string(),
                    message: format!("cannot parse '{cell}' as a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(AmcError::Config("samples file has no rows".into()));
    }
    SampleBatch::from_rows(&rows, Provenance::StudentInitial)
}

pub fn load_samples(path: &Path) -> Result<SampleBatch> {
    read_samples_csv(std::fs::File::open(path)?)
}

pub const CONFIG_VERSION: u32 = 1;

/// Flat run configuration. Absent keys take the task's defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
    /// Student batch size `K`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator_loss: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub independent_z0: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metropolis_adjust: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance_target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapt_window: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_psi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_final_scale: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub persistent: Option<bool>,
    /// Samples drawn for each KSD evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ksd_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    /// `(T, eta)` settings of the chain-length sweep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<(usize, f64)>>,
    /// Scale of the random initial sampler means (BNN task).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub splits: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<f64>,
    /// Particle counts of the stored-particle MALA baselines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mala_particles: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_timing: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub obs_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chain_steps: Option<usize>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self {
            version: CONFIG_VERSION,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| AmcError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(AmcError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LoadReport> {
        read_csv(text.as_bytes(), "fixture", "label", MissingPolicy::Drop)
    }

    #[test]
    fn two_rows_exact() {
        let r = parse("a,b,label\n1.5,-2,1\n0,3.25,0\n").unwrap();
        assert_eq!(r.dataset.features.values(), &[1.5, -2.0, 0.0, 3.25]);
        assert_eq!(r.dataset.labels, vec![1.0, 0.0]);
        assert_eq!(r.dropped_rows, 0);
        assert_eq!(r.dataset.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn label_column_can_sit_anywhere() {
        let r = parse("label,a\n1,0.5\n0,0.25\n").unwrap();
        assert_eq!(r.dataset.features.values(), &[0.5, 0.25]);
    }

    #[test]
    fn malformed_row_dropped_and_counted() {
        let r = parse("a,b,label\n1,2,1\n3,,0\n5,6,0\n7,8\n").unwrap();
        assert_eq!(r.dataset.len(), 2);
        assert_eq!(r.dropped_rows, 2);
        let one = parse("a,b,label\n1,2,1\n3,,0\n5,6,0\n").unwrap();
        assert_eq!((one.dataset.len(), one.dropped_rows), (2, 1));
    }

    #[test]
    fn error_policy_reports_missing() {
        let r = read_csv("a,label\n,1\n".as_bytes(), "f", "label", MissingPolicy::Error);
        assert!(matches!(r, Err(AmcError::Parse { row: 1, .. })));
    }

    #[test]
    fn unparseable_cell_names_row_and_column() {
        match parse("a,b,label\n1,2,1\n3,oops,0\n") {
            Err(AmcError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plus_minus_one_labels_are_remapped() {
        let r = parse("a,label\n1,-1\n2,1\n3,-1\n").unwrap();
        assert_eq!(r.dataset.labels, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn non_binary_labels_rejected() {
        assert!(matches!(parse("a,label\n1,2\n2,0\n"), Err(AmcError::Config(_))));
        assert!(matches!(parse("a,label\n1,0.5\n"), Err(AmcError::Config(_))));
    }

    #[test]
    fn csv_round_trip_is_idempotent() {
        let d = two_moons(30, 0.1, 3).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "two_moons", "label", MissingPolicy::Drop).unwrap().dataset;
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_csv(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = two_moons(10, 0.1, 0).unwrap();
        let (train, test) = split(&d, 0.5, 7).unwrap();
        assert_eq!((train.len(), test.len()), (5, 5));
        let (train2, test2) = split(&d, 0.5, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(split(&d, 0.01, 7).is_err());
        assert!(split(&d, 1.0, 7).is_err());
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let test = split_indices(37, 0.3, 5);
        let set: BTreeSet<usize> = test.iter().copied().collect();
        assert_eq!(set.len(), test.len());
        assert_eq!(test.len(), 11);
    }

    #[test]
    fn twenty_seeds_give_distinct_splits() {
        let sets: BTreeSet<Vec<usize>> = (0..20).map(|s| split_indices(100, 0.5, s)).collect();
        assert!(sets.len() >= 19);
    }

    #[test]
    fn train_features_are_standardised() {
        let d = two_moons(200, 0.2, 1).unwrap();
        let (train, _) = split(&d, 0.25, 3).unwrap();
        for j in 0..2 {
            let col: Vec<f64> = (0..train.len()).map(|i| train.features.get(i, j)).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_columns_are_flagged() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [4.0, 5.0]]).unwrap();
        let d = Dataset::new("c", x, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let (train, _) = split(&d, 0.25, 0).unwrap();
        let stats = train.standardization.as_ref().unwrap();
        assert_eq!(stats.constant_columns, vec![1]);
        assert!((0..train.len()).all(|i| train.features.get(i, 1) == 0.0));
    }

    #[test]
    fn moons_are_balanced() {
        let d = two_moons(400, 0.1, 0).unwrap();
        assert_eq!(d.labels.iter().sum::<f64>(), 200.0);
    }

    #[test]
    fn samples_round_trip() {
        let b = SampleBatch::from_rows(&[[0.1, -2.5], [1e-300, 3.0]], Provenance::StudentInitial).unwrap();
        let mut buf = Vec::new();
        write_samples_csv(&b, &mut buf).unwrap();
        assert_eq!(read_samples_csv(buf.as_slice()).unwrap().particles(), b.particles());
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let mut cfg = RunConfig::new();
        cfg.task = Some("gmm-fit".into());
        cfg.step_size = Some(0.1);
        cfg.hidden = Some(vec![20, 20]);
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(
            RunConfig::from_json(r#"{"version": 1, "stepsize": 0.1}"#),
            Err(AmcError::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"version": 2}"#).is_err());
    }
}
