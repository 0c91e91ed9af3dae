//! Downstream and geometric evaluation of embeddings.

pub mod classify;
pub mod geometry;
pub mod spectrum;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use classify::{balanced_accuracy, knn_accuracy, knn_predict, linear_probe, LogisticProbe, ProbeOptions};
pub use geometry::{alignment_same_class, alignment_views, silhouette, uniformity};
pub use spectrum::{effective_rank, entropy_rank, lidar, rankme, LIDAR_DELTA};

pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Validates a finite `[n × d]` matrix with `labels` rows.
pub(crate) fn check_matrix(z: &Tensor, labels: usize) -> Result<(usize, usize)> {
    if z.shape().len() != 2 {
        return Err(Error::shape(format!("embeddings must be a matrix, got {:?}", z.shape())));
    }
    if z.rows() != labels {
        return Err(Error::shape(format!("{} rows vs {labels} labels", z.rows())));
    }
    if !z.all_finite() {
        return Err(Error::numerical("embeddings contain non-finite values"));
    }
    Ok((z.rows(), z.cols()))
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ColumnStats {
    pub fn of(z: &Tensor) -> Self {
        let (n, d) = (z.rows(), z.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for i in 0..n {
            mean.iter_mut().zip(z.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        for i in 0..n {
            std.iter_mut().zip(z.row(i)).zip(&mean).for_each(|((s, x), m)| *s += (x - m) * (x - m));
        }
        std.iter_mut().for_each(|s| *s = (*s / n.max(1) as f64).sqrt());
        Self { mean, std }
    }
}

/// `(x − μ) / (σ + 1e-8)` with the given statistics.
pub fn standardize_with(z: &Tensor, stats: &ColumnStats) -> Tensor {
    let d = z.cols();
    let mut out = z.clone();
    for (k, x) in out.data_mut().iter_mut().enumerate() {
        let j = k % d;
        *x = (*x - stats.mean[j]) / (stats.std[j] + STANDARDIZE_EPS);
    }
    out
}

/// Standardizes `z` with its own column statistics.
pub fn standardize(z: &Tensor) -> Tensor {
    standardize_with(z, &ColumnStats::of(z))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub knn5_acc: f64,
    pub linear_acc: f64,
    pub silhouette: f64,
    pub l_align: f64,
    pub l_uniform: f64,
    pub eff_rank: f64,
    pub rankme: f64,
    pub lidar: f64,
}

impl MetricsReport {
    pub const FIELDS: [&'static str; 8] =
        ["knn5_acc", "linear_acc", "silhouette", "l_align", "l_uniform", "eff_rank", "rankme", "lidar"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.knn5_acc,
            self.linear_acc,
            self.silhouette,
            self.l_align,
            self.l_uniform,
            self.eff_rank,
            self.rankme,
            self.lidar,
        ]
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        self.values().iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::csv_header())?;
        writeln!(w, "{}", self.csv_row())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("finite report fields serialize")
    }
}

/// Inputs for a full report: unit-norm train/test embeddings and, for
/// LiDAR, several encoded views of each test instance (`[N × V × d]`).
pub struct EvalSet<'a> {
    pub train: &'a Tensor,
    pub train_labels: &'a [usize],
    pub test: &'a Tensor,
    pub test_labels: &'a [usize],
    pub test_views: &'a Tensor,
    /// Seeds pair sampling for large sets.
    pub seed: u64,
}

/// Computes every field of [`MetricsReport`].
///
/// Accuracies use the raw embeddings; alignment and uniformity the raw
/// unit-norm test embeddings (same-class positives); the spectrum metrics
/// standardized test embeddings.
pub fn evaluate(set: &EvalSet<'_>) -> Result<MetricsReport> {
    let knn5_acc = knn_accuracy(set.train, set.train_labels, set.test, set.test_labels, 5)?;
    let linear_acc = linear_probe(set.train, set.train_labels, set.test, set.test_labels)?;
    let silhouette = silhouette(set.test, set.test_labels)?;
    let l_align = alignment_same_class(set.test, set.test_labels, 2.0, set.seed)?;
    let l_uniform = uniformity(set.test, 2.0, set.seed)?;
    let std_test = standardize(set.test);
    let eff_rank = effective_rank(&std_test)?;
    let rankme = rankme(&std_test)?;
    let views = set.test_views;
    let flat = views.clone().reshape(vec![views.numel() / views.cols().max(1), views.cols()])?;
    let std_views = standardize(&flat).reshape(views.shape().to_vec())?;
    let lidar = lidar(&std_views, LIDAR_DELTA)?;
    Ok(MetricsReport { knn5_acc, linear_acc, silhouette, l_align, l_uniform, eff_rank, rankme, lidar })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_cases() {
        let z = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![5.0, 5.0]]).unwrap();
        let s = standardize(&z);
        let stats = ColumnStats::of(&s);
        assert!(stats.mean[0].abs() < 1e-12);
        assert!((stats.std[0] - 1.0).abs() < 1e-7);
        assert!(s.data().iter().skip(1).step_by(2).all(|&x| x == 0.0));
        let again = standardize(&s);
        assert!(again.data().iter().zip(s.data()).all(|(a, b)| (a - b).abs() < 1e-7));
    }

    #[test]
    fn report_csv_and_json() {
        let r = MetricsReport {
            knn5_acc: 0.9,
            linear_acc: 0.8,
            silhouette: 0.4,
            l_align: 0.3,
            l_uniform: -1.3,
            eff_rank: 1.9,
            rankme: 1.9,
            lidar: 1.5,
        };
        assert_eq!(
            MetricsReport::csv_header(),
            "knn5_acc,linear_acc,silhouette,l_align,l_uniform,eff_rank,rankme,lidar"
        );
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
