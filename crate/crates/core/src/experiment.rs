//! Experiment configuration, single-run evaluation and ablation aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, GmmSpec};
use crate::error::{Error, Result};
use crate::losses::LossesEnabled;
use crate::metrics::{self, EvalSet, MetricsReport};
use crate::model::MlpEncoder;
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::train::{self, RunArtifacts, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Encoded views per test instance for LiDAR.
    pub views: usize,
    pub sigma_aug: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { views: 4, sigma_aug: 0.15, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<AblationVariant>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2, 3, 4], variants: AblationVariant::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: Option<String>,
    pub data: GmmSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Loss-term ablations of the full objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoDiv,
    NoVi,
    NoVv,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::Full, Self::NoDiv, Self::NoVi, Self::NoVv];

    pub fn losses(self) -> LossesEnabled {
        match self {
            Self::Full => LossesEnabled { vv: true, vi: true, div: true },
            Self::NoDiv => LossesEnabled { vv: true, vi: true, div: false },
            Self::NoVi => LossesEnabled { vv: true, vi: false, div: true },
            Self::NoVv => LossesEnabled { vv: false, vi: true, div: true },
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "Full IConE",
            Self::NoDiv => "No L_div",
            Self::NoVi => "No L_vi",
            Self::NoVv => "No L_vv",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDiv => "no_div",
            Self::NoVi => "no_vi",
            Self::NoVv => "no_vv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.key() == s).ok_or_else(|| {
            Error::config(format!("unknown ablation variant {s:?} (expected full, no_div, no_vi, no_vv)"))
        })
    }
}

/// Encodes `V` augmented copies of each point in `ids`; `[len × V × d]`.
pub fn encode_views(
    encoder: &MlpEncoder,
    ds: &Dataset,
    ids: &[usize],
    views: usize,
    sigma_aug: f64,
    seed: u64,
) -> Result<Tensor> {
    let aug = data::augment(&ds.gather(ids), views, sigma_aug, derive_seed(seed, "eval_views", 0))?;
    let flat = aug.reshape(vec![ids.len() * views, ds.points.cols()])?;
    let z = encoder.encode_values(&flat)?;
    z.reshape(vec![ids.len(), views, encoder.out_dim()])
}

/// Full report for `embeddings` (`[N × d]`, all instances) of a trained encoder.
pub fn evaluate_embeddings(
    ds: &Dataset,
    embeddings: &Tensor,
    encoder: &MlpEncoder,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let train_z = gather_rows(embeddings, &ds.train);
    let test_z = gather_rows(embeddings, &ds.test);
    let train_labels = ds.labels_of(&ds.train);
    let test_labels = ds.labels_of(&ds.test);
    let test_views = encode_views(encoder, ds, &ds.test, cfg.views, cfg.sigma_aug, cfg.seed)?;
    metrics::evaluate(&EvalSet {
        train: &train_z,
        train_labels: &train_labels,
        test: &test_z,
        test_labels: &test_labels,
        test_views: &test_views,
        seed: cfg.seed,
    })
}

/// Report for the final model of a run.
pub fn evaluate_run(ds: &Dataset, run: &RunArtifacts, cfg: &EvalConfig) -> Result<MetricsReport> {
    let z = run.final_embeddings(ds)?;
    evaluate_embeddings(ds, &z, &run.model.encoder, cfg)
}

pub fn gather_rows(z: &Tensor, ids: &[usize]) -> Tensor {
    let d = z.cols();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(z.row(i));
    }
    Tensor::new(vec![ids.len(), d], out).expect("gather shape")
}

/// Trains `variant` on `ds` with `seed` and evaluates the final model.
pub fn run_variant(
    ds: &Dataset,
    base: &TrainConfig,
    variant: AblationVariant,
    seed: u64,
    eval: &EvalConfig,
) -> Result<(RunArtifacts, MetricsReport)> {
    let cfg = TrainConfig { losses: variant.losses(), seed, ..base.clone() };
    let run = train::train(ds, &cfg)?;
    let report = evaluate_run(ds, &run, eval)?;
    Ok((run, report))
}

/// Mean and sample standard deviation of each report field over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: [f64; 8],
    pub std: [f64; 8],
    pub runs: usize,
}

impl Aggregate {
    pub fn of(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::config("no runs to aggregate"));
        }
        let n = reports.len() as f64;
        let mut mean = [0.0; 8];
        let mut std = [0.0; 8];
        for r in reports {
            mean.iter_mut().zip(r.values()).for_each(|(m, v)| *m += v / n);
        }
        if reports.len() > 1 {
            for r in reports {
                std.iter_mut().zip(r.values()).zip(mean).for_each(|((s, v), m)| *s += (v - m).powi(2));
            }
            std.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
        }
        Ok(Self { mean, std, runs: reports.len() })
    }

    pub fn field(&self, name: &str) -> Option<(f64, f64)> {
        MetricsReport::FIELDS.iter().position(|f| *f == name).map(|k| (self.mean[k], self.std[k]))
    }
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub aggregate: Aggregate,
    pub per_seed: Vec<(u64, MetricsReport)>,
}

/// Markdown table with `mean ± std` cells (accuracies in percent) and an
/// ordering footer by kNN accuracy.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Variant | kNN-5 (%) | Linear (%) | Silhouette | L_align | L_uniform | Eff. rank | RankMe | LiDAR |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|");
    for row in rows {
        let a = &row.aggregate;
        let mut cells = vec![row.variant.label().to_string()];
        for k in 0..8 {
            let scale = if k < 2 { 100.0 } else { 1.0 };
            let prec = if k < 2 { 1 } else { 3 };
            cells.push(format!("{:.prec$} ± {:.prec$}", a.mean[k] * scale, a.std[k] * scale));
        }
        let _ = writeln!(out, "| {} |", cells.join(" | "));
    }
    let mut order: Vec<&AblationRow> = rows.iter().collect();
    order.sort_by(|a, b| b.aggregate.mean[0].total_cmp(&a.aggregate.mean[0]));
    let names: Vec<&str> = order.iter().map(|r| r.variant.label()).collect();
    let runs = rows.first().map_or(0, |r| r.aggregate.runs);
    let _ = writeln!(out, "\nkNN ordering: {} ({runs} seeds)", names.join(" > "));
    out
}

/// CSV with one row per variant and seed.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("variant,seed,{}\n", MetricsReport::csv_header());
    for row in rows {
        for (seed, r) in &row.per_seed {
            let _ = writeln!(out, "{},{seed},{}", row.variant.key(), r.csv_row());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_toml("[train]\nbatch_size = 2\nregularizer = \"vcreg\"\n").unwrap();
        assert_eq!(partial.train.batch_size, 2);
        assert_eq!(partial.train.epochs, 300);
        assert!(matches!(ExperimentConfig::from_toml("[train]\nbatchsize = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn aggregate_mean_std() {
        let mk = |x: f64| MetricsReport {
            knn5_acc: x,
            linear_acc: x,
            silhouette: x,
            l_align: x,
            l_uniform: -x,
            eff_rank: 1.0,
            rankme: 1.0,
            lidar: 1.0,
        };
        let a = Aggregate::of(&[mk(0.2), mk(0.4)]).unwrap();
        assert!((a.mean[0] - 0.3).abs() < 1e-15);
        assert!((a.std[0] - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.field("eff_rank"), Some((1.0, 0.0)));
    }

    #[test]
    fn variant_keys() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.key()).unwrap(), v);
        }
        assert!(AblationVariant::parse("nodiv").is_err());
    }
}
