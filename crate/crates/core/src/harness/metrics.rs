//! Evaluation metrics for regression, classification and latent embeddings.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{QepError, Result};
use crate::qed::{covariance_scaling, log_density, QedParams};

/// Metric block of the metrics file; absent entries serialize as null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: Option<f64>,
    pub std: Option<f64>,
    pub nll: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(QepError::Evaluation(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute error and the standard deviation of the absolute errors.
pub fn mae_std(pred: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<(f64, f64)> {
    check_shapes(pred, target)?;
    let err: Vec<f64> = pred.iter().zip(target.iter()).map(|(p, t)| (p - t).abs()).collect();
    let n = err.len() as f64;
    let mae = err.iter().sum::<f64>() / n;
    let var = err.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n;
    Ok((mae, var.sqrt()))
}

/// Mean negative log-density of each target row under a q-ED whose mean and
/// diagonal covariance match the predictive moments.
pub fn qed_nll(mean: &DMatrix<f64>, var: &DMatrix<f64>, target: &DMatrix<f64>, q: f64) -> Result<f64> {
    check_shapes(mean, target)?;
    check_shapes(var, target)?;
    let d = mean.ncols();
    let scaling = covariance_scaling(d, q);
    let mut total = 0.0;
    for i in 0..mean.nrows() {
        let scale = DMatrix::from_diagonal(&DVector::from_iterator(d, var.row(i).iter().map(|v| v.max(1e-12) / scaling)));
        let p = QedParams::new(mean.row(i).transpose(), &scale, q)?;
        total -= log_density(&target.row(i).transpose(), &p)?;
    }
    Ok(total / mean.nrows() as f64)
}

fn check_labels(probs: &DMatrix<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() || labels.is_empty() {
        return Err(QepError::Evaluation("probabilities and labels differ in length".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= probs.ncols()) {
        return Err(QepError::Evaluation(format!("label {bad} outside the {} training classes", probs.ncols())));
    }
    Ok(())
}

pub fn accuracy(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    let hits = labels.iter().enumerate().filter(|&(i, &l)| probs.row(i).transpose().argmax().0 == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn categorical_nll(probs: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    check_labels(probs, labels)?;
    Ok(-labels.iter().enumerate().map(|(i, &l)| probs[(i, l)].max(1e-300).ln()).sum::<f64>() / labels.len() as f64)
}

/// Area under the ROC curve by the rank statistic, ties counted half.
/// `None` when one side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

/// Unweighted one-vs-rest average over the classes present in `labels`;
/// `None` when the labels hold a single class.
pub fn macro_auc(probs: &DMatrix<f64>, labels: &[usize]) -> Result<Option<f64>> {
    check_labels(probs, labels)?;
    let aucs: Vec<f64> = (0..probs.ncols())
        .filter_map(|c| {
            let scores: Vec<f64> = probs.column(c).iter().copied().collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&scores, &pos)
        })
        .collect();
    Ok((!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64))
}

fn class_means(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> Vec<DVector<f64>> {
    (0..classes)
        .map(|c| {
            let mut m = DVector::zeros(x.ncols());
            let mut k = 0;
            for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == c) {
                m += x.row(i).transpose();
                k += 1;
            }
            m / k.max(1) as f64
        })
        .collect()
}

/// Within-class scatter divided by total scatter, in [0, 1].
pub fn within_class_dispersion(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> f64 {
    let means = class_means(x, labels, classes);
    let grand = x.row_mean().transpose();
    let mut within = 0.0;
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let r = x.row(i).transpose();
        within += (&r - &means[l]).norm_squared();
        total += (&r - &grand).norm_squared();
    }
    if total > 0.0 { within / total } else { 0.0 }
}

/// Fraction of points whose nearest class centroid is their own class.
pub fn centroid_purity(x: &DMatrix<f64>, labels: &[usize], classes: usize) -> f64 {
    let means = class_means(x, labels, classes);
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let r = x.row(i).transpose();
            let best = (0..classes).min_by(|&a, &b| (&r - &means[a]).norm_squared().total_cmp(&(&r - &means[b]).norm_squared()));
            best == Some(l)
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}
