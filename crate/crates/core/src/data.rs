//! Two-dimensional Gaussian-mixture toy data, view augmentation and batching.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub radius: f64,
    pub class_sigma: f64,
    pub seed: u64,
    /// Subsample the last `⌈C/2⌉` classes to `⌈per_class / k⌉` points.
    pub minority_factor: Option<usize>,
}

impl Default for GmmSpec {
    fn default() -> Self {
        Self { num_classes: 5, per_class: 350, radius: 3.0, class_sigma: 0.8, seed: 0, minority_factor: None }
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.per_class < 2 {
            return Err(Error::config(format!("per_class must be at least 2, got {}", self.per_class)));
        }
        if self.minority_factor == Some(0) {
            return Err(Error::config("minority_factor must be positive"));
        }
        if !(self.class_sigma >= 0.0 && self.radius >= 0.0) {
            return Err(Error::config("radius and class_sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn center(&self, class: usize) -> [f64; 2] {
        let theta = 2.0 * PI * class as f64 / self.num_classes as f64;
        [self.radius * theta.cos(), self.radius * theta.sin()]
    }

    pub fn class_count(&self, class: usize) -> usize {
        let minority_start = self.num_classes - self.num_classes.div_ceil(2);
        match self.minority_factor {
            Some(k) if class >= minority_start => self.per_class.div_ceil(k),
            _ => self.per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled points with fixed instance ids (`0..N`) and a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, id: usize) -> &[f64] {
        self.points.row(id)
    }

    pub fn split_of(&self) -> Vec<Split> {
        let mut out = vec![Split::Test; self.len()];
        for &i in &self.train {
            out[i] = Split::Train;
        }
        out
    }

    pub fn labels_of(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.labels[i]).collect()
    }

    /// Rows of `points` for `ids`, as a `[len × 2]` tensor.
    pub fn gather(&self, ids: &[usize]) -> Tensor {
        let d = self.points.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.point(i));
        }
        Tensor::new(vec![ids.len(), d], data).expect("gather shape")
    }

    /// Position of each training instance within `train`, `None` for test ids.
    pub fn train_rank(&self) -> Vec<Option<usize>> {
        let mut rank = vec![None; self.len()];
        for (r, &i) in self.train.iter().enumerate() {
            rank[i] = Some(r);
        }
        rank
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["instance_id", "label", "split", "x0", "x1"]).map_err(csv_err)?;
        let split = self.split_of();
        for (i, (label, part)) in self.labels.iter().zip(&split).enumerate() {
            let p = self.point(i);
            out.write_record([
                i.to_string(),
                label.to_string(),
                part.as_str().to_string(),
                p[0].to_string(),
                p[1].to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`Dataset::write_csv`]. Rows must list ids `0..N` in order.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != ["instance_id", "label", "split", "x0", "x1"] {
            return Err(Error::Parse(format!("unexpected dataset header {header:?}")));
        }
        let (mut points, mut labels, mut train, mut test) = (vec![], vec![], vec![], vec![]);
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let id: usize = parse(&rec[0])?;
            if id != row {
                return Err(Error::Parse(format!("instance_id {id} at row {row}")));
            }
            labels.push(parse(&rec[1])?);
            match &rec[2] {
                "train" => train.push(id),
                "test" => test.push(id),
                other => return Err(Error::Parse(format!("unknown split {other:?}"))),
            }
            points.push(parse::<f64>(&rec[3])?);
            points.push(parse::<f64>(&rec[4])?);
        }
        if labels.is_empty() {
            return Err(Error::Parse("dataset file has no rows".into()));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset { points: Tensor::new(vec![labels.len(), 2], points)?, labels, num_classes, train, test })
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

pub(crate) fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("cannot parse {s:?}")))
}

/// Samples the mixture and a stratified 70/30 split.
pub fn generate(spec: &GmmSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut sample_rng = rng::stream(spec.seed, "gmm");
    let mut split_rng = rng::stream(spec.seed, "split");
    let noise = Normal::new(0.0, spec.class_sigma).map_err(|e| Error::config(e.to_string()))?;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..spec.num_classes {
        let [cx, cy] = spec.center(class);
        let count = spec.class_count(class);
        let start = labels.len();
        for _ in 0..count {
            points.push(cx + noise.sample(&mut sample_rng));
            points.push(cy + noise.sample(&mut sample_rng));
            labels.push(class);
        }
        let mut ids: Vec<usize> = (start..start + count).collect();
        ids.shuffle(&mut split_rng);
        let n_train = ((count as f64 * TRAIN_FRACTION).round() as usize).clamp(1, count - 1);
        let (tr, te) = ids.split_at(n_train);
        train.extend_from_slice(tr);
        test.extend_from_slice(te);
    }
    train.sort_unstable();
    test.sort_unstable();
    let n = labels.len();
    Ok(Dataset { points: Tensor::new(vec![n, 2], points)?, labels, num_classes: spec.num_classes, train, test })
}

/// `v` noisy copies of each row of `points: [b × d]`, shaped `[b × v × d]`.
pub fn augment(points: &Tensor, v: usize, sigma_aug: f64, seed: u64) -> Result<Tensor> {
    if points.shape().len() != 2 {
        return Err(Error::shape(format!("points must be a matrix, got {:?}", points.shape())));
    }
    if !(sigma_aug >= 0.0 && sigma_aug.is_finite()) {
        return Err(Error::config(format!("sigma_aug must be non-negative, got {sigma_aug}")));
    }
    let (b, d) = (points.rows(), points.cols());
    let mut rng = rng::stream(seed, "augment");
    let noise = Normal::new(0.0, sigma_aug).map_err(|e| Error::config(e.to_string()))?;
    let mut out = Vec::with_capacity(b * v * d);
    for i in 0..b {
        let p = points.row(i);
        for _ in 0..v {
            out.extend(p.iter().map(|&x| x + noise.sample(&mut rng)));
        }
    }
    Tensor::new(vec![b, v, d], out)
}

/// Shuffled mini-batches of `ids` for one epoch; the last batch may be short.
pub fn batches(ids: &[usize], batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > ids.len() {
        return Err(Error::config(format!("batch_size {batch_size} outside [1, {}]", ids.len())));
    }
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::stream(epoch_seed, "batches"));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
