//! Datasets: the synthetic generators and CSV ingestion.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, QepError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { classes: usize },
    /// Unsupervised embedding of `y`; `labels` are kept for diagnostics only.
    Latent { classes: usize },
}

/// Per-column affine maps fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: Task,
    /// N × Q inputs in original units (zero columns for latent tasks).
    pub x: DMatrix<f64>,
    /// N × D targets, or N × 1 integer labels for classification.
    pub y: DMatrix<f64>,
    /// Noise-free targets when the generator knows them.
    pub truth: Option<DMatrix<f64>>,
    pub labels: Option<Vec<usize>>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub standardization: Standardization,
}

fn rows_of(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn column_stats(m: &DMatrix<f64>, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len().max(1) as f64;
    (0..m.ncols())
        .map(|j| {
            let mean = idx.iter().map(|&i| m[(i, j)]).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (m[(i, j)] - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

fn apply(m: &DMatrix<f64>, mean: &[f64], scale: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - mean[j]) / scale[j])
}

impl Dataset {
    fn assemble(
        name: &str,
        task: Task,
        x: DMatrix<f64>,
        y: DMatrix<f64>,
        truth: Option<DMatrix<f64>>,
        labels: Option<Vec<usize>>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Dataset {
        let (x_mean, x_scale) = column_stats(&x, &train);
        let (y_mean, y_scale) = match task {
            Task::Classification { .. } => (vec![0.0; y.ncols()], vec![1.0; y.ncols()]),
            _ => column_stats(&y, &train),
        };
        Dataset {
            name: name.to_string(),
            task,
            x,
            y,
            truth,
            labels,
            train,
            test,
            standardization: Standardization { x_mean, x_scale, y_mean, y_scale },
        }
    }

    pub fn train_x(&self) -> DMatrix<f64> {
        let s = &self.standardization;
        apply(&rows_of(&self.x, &self.train), &s.x_mean, &s.x_scale)
    }

    pub fn test_x(&self) -> DMatrix<f64> {
        let s = &self.standardization;
        apply(&rows_of(&self.x, &self.test), &s.x_mean, &s.x_scale)
    }

    /// Training targets on the model scale.
    pub fn train_y(&self) -> DMatrix<f64> {
        let s = &self.standardization;
        apply(&rows_of(&self.y, &self.train), &s.y_mean, &s.y_scale)
    }

    /// Test targets in original units.
    pub fn test_y(&self) -> DMatrix<f64> {
        rows_of(&self.y, &self.test)
    }

    pub fn test_truth(&self) -> Option<DMatrix<f64>> {
        self.truth.as_ref().map(|t| rows_of(t, &self.test))
    }

    pub fn train_labels(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|l| self.train.iter().map(|&i| l[i]).collect())
    }

    /// Maps model-scale targets back to original units.
    pub fn unstandardize_y(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let s = &self.standardization;
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s.y_scale[j] + s.y_mean[j])
    }

    pub fn y_scale(&self) -> &[f64] {
        &self.standardization.y_scale
    }
}

pub fn u_jump(t: f64) -> f64 {
    if (0.0..=1.0).contains(&t) {
        1.0
    } else if t > 1.0 && t <= 1.5 {
        0.5
    } else if t > 1.5 && t <= 2.0 {
        2.0
    } else {
        0.0
    }
}

pub fn u_turn(t: f64) -> f64 {
    if (0.0..=1.0).contains(&t) {
        1.5 * t
    } else if t > 1.0 && t <= 1.5 {
        3.5 - 2.0 * t
    } else if t > 1.5 && t <= 2.0 {
        3.0 * t - 4.0
    } else {
        0.0
    }
}

pub const TS_NOISE: f64 = 0.1;

fn linspace(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// Two-output series with jumps and kinks: 100 noisy training points and
/// 50 test points on [0, 2]. Test targets carry noise too; `truth` holds the
/// clean trajectories.
pub fn gen_timeseries(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ts: Vec<f64> = linspace(100, 0.0, 2.0).into_iter().chain(linspace(50, 0.0, 2.0)).collect();
    let n = ts.len();
    let truth = DMatrix::from_fn(n, 2, |i, j| if j == 0 { u_jump(ts[i]) } else { u_turn(ts[i]) });
    let mut y = truth.clone();
    for i in 0..n {
        for j in 0..2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] += TS_NOISE * e;
        }
    }
    let x = DMatrix::from_column_slice(n, 1, &ts);
    Dataset::assemble("timeseries", Task::Regression, x, y, Some(truth), None, (0..100).collect(), (100..n).collect())
}

/// `[cos(0.4·u·π·‖x‖₁)] + 1` with rounding half to even.
pub fn rhombus_label(x: &[f64], u: f64) -> usize {
    let l1: f64 = x.iter().map(|v| v.abs()).sum();
    ((0.4 * u * std::f64::consts::PI * l1).cos().round_ties_even() + 1.0) as usize
}

/// Three classes on annular regions of a rhombus. A single `u` is drawn per
/// dataset so that the class regions are sharp.
pub fn gen_rhombus(seed: u64, n: usize, train_fraction: f64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = rng.random_range(0.0..1.0);
    let x = DMatrix::from_fn(n, 2, |_, _| StandardNormal.sample(&mut rng));
    let labels: Vec<usize> = (0..n).map(|i| rhombus_label(&[x[(i, 0)], x[(i, 1)]], u)).collect();
    let y = DMatrix::from_fn(n, 1, |i, _| labels[i] as f64);
    let (train, test) = split(n, train_fraction, &mut rng)?;
    Ok(Dataset::assemble("rhombus", Task::Classification { classes: 3 }, x, y, None, Some(labels), train, test))
}

pub const CLUSTER_DIM: usize = 12;
pub const CLUSTER_POINTS: usize = 1000;
pub const CLUSTER_SEPARATION: f64 = 6.0;

/// Three isotropic unit-variance clusters in 12 dimensions whose centers sit
/// pairwise `CLUSTER_SEPARATION` apart in a random plane.
pub fn gen_clusters(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_orthonormal(CLUSTER_DIM, 2, &mut rng);
    let radius = CLUSTER_SEPARATION / 3f64.sqrt();
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            (0..CLUSTER_DIM).map(|j| radius * (basis[(j, 0)] * a.cos() + basis[(j, 1)] * a.sin())).collect()
        })
        .collect();
    let labels: Vec<usize> = (0..CLUSTER_POINTS).map(|i| i % 3).collect();
    let y = DMatrix::from_fn(CLUSTER_POINTS, CLUSTER_DIM, |i, j| {
        let e: f64 = StandardNormal.sample(&mut rng);
        centers[labels[i]][j] + e
    });
    let x = DMatrix::zeros(CLUSTER_POINTS, 0);
    Dataset::assemble(
        "clusters",
        Task::Latent { classes: 3 },
        x,
        y,
        None,
        Some(labels),
        (0..CLUSTER_POINTS).collect(),
        vec![],
    )
}

fn random_orthonormal<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Seeded shuffle into train and test index sets.
pub fn split<R: Rng + ?Sized>(n: usize, train_fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(invalid(format!("split fraction must lie in (0, 1], got {train_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(QepError::Evaluation(format!("split fraction {train_fraction} leaves an empty train or test set")));
    }
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Reads a numeric CSV with a header row. `targets` name the output columns;
/// all other columns are features.
pub fn load_csv(path: &Path, targets: &[String], task: Task, train_fraction: f64, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_path(path).map_err(|e| ingest(0, e))?;
    let header: Vec<String> = reader.headers().map_err(|e| ingest(1, e))?.iter().map(str::to_string).collect();
    if targets.is_empty() {
        return Err(QepError::Config("data.targets must name at least one column".into()));
    }
    let target_idx: Vec<usize> = targets
        .iter()
        .map(|t| header.iter().position(|h| h == t).ok_or_else(|| QepError::Config(format!("no column named `{t}`"))))
        .collect::<Result<_>>()?;
    let feature_idx: Vec<usize> = (0..header.len()).filter(|i| !target_idx.contains(i)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        // data rows are numbered from 2, after the header
        let row = k + 2;
        let rec = rec.map_err(|e| ingest(row, e))?;
        let vals = rec
            .iter()
            .map(|c| c.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| ingest(row, format!("non-numeric cell `{c}`"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(vals);
    }
    let n = rows.len();
    if n == 0 {
        return Err(ingest(2, "no data rows"));
    }
    let x = DMatrix::from_fn(n, feature_idx.len(), |i, j| rows[i][feature_idx[j]]);
    let y = DMatrix::from_fn(n, target_idx.len(), |i, j| rows[i][target_idx[j]]);
    let labels = match task {
        Task::Classification { classes } => {
            if y.ncols() != 1 {
                return Err(QepError::Config("classification takes one target column".into()));
            }
            let l = y
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                        Ok(v as usize)
                    } else {
                        Err(ingest(i + 2, format!("label {v} outside 0..{classes}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(l)
        }
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = split(n, train_fraction, &mut rng)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv");
    Ok(Dataset::assemble(name, task, x, y, None, labels, train, test))
}

fn ingest(row: usize, e: impl std::fmt::Display) -> QepError {
    QepError::Ingestion { row, msg: e.to_string() }
}
