//! The training loop: views, joint loss, one Adam step over encoder and table.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses::{
    self, BatchTargets, LossBreakdown, LossConfig, LossesEnabled, RegularizerChoice, SigRegParams, Variant, VcRegParams,
};
use crate::model::{EmbeddingTable, MlpEncoder, Model, ParamMut};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub views: usize,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    /// Standard deviation of the table initialization.
    pub init_sigma: f64,
    pub sigma_aug: f64,
    pub out_dim: usize,
    pub losses: LossesEnabled,
    pub regularizer: RegularizerChoice,
    pub variant: Variant,
    pub vcreg: VcRegParams,
    pub sigreg: SigRegParams,
    pub seed: u64,
    pub snapshot_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            views: 4,
            epochs: 300,
            lr: 1e-3,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            init_sigma: 0.02,
            sigma_aug: 0.15,
            out_dim: 2,
            losses: LossesEnabled::default(),
            regularizer: RegularizerChoice::Orthogonality,
            variant: Variant::Unsupervised,
            vcreg: VcRegParams::default(),
            sigreg: SigRegParams::default(),
            seed: 0,
            snapshot_epochs: vec![0, 5, 25, 100, 200, 299],
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            enabled: self.losses,
            regularizer: self.regularizer,
            variant: self.variant,
            vcreg: self.vcreg,
            sigreg: self.sigreg,
        }
    }

    /// Checks the config on its own and against `ds`.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.views == 0 || (self.losses.vv && self.views < 2) {
            return Err(Error::config(format!("views = {} but the view-view loss needs at least 2", self.views)));
        }
        if self.batch_size == 0 || self.batch_size > ds.train.len() {
            return Err(Error::config(format!("batch_size {} outside [1, {}]", self.batch_size, ds.train.len())));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if let Some(&e) = self.snapshot_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::config(format!("snapshot epoch {e} not below epochs = {}", self.epochs)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.init_sigma > 0.0 && self.sigma_aug >= 0.0) {
            return Err(Error::config(
                "weight_decay, init_sigma and sigma_aug must be non-negative (init_sigma positive)",
            ));
        }
        if self.out_dim == 0 {
            return Err(Error::config("out_dim must be positive"));
        }
        if !(self.losses.vv || self.losses.vi || self.losses.div)
            || (!self.losses.vv && !self.losses.vi && self.regularizer == RegularizerChoice::None)
        {
            return Err(Error::config("no loss term enabled"));
        }
        if self.regularizer == RegularizerChoice::SigReg {
            self.sigreg.validate()?;
        }
        if self.losses.div && self.table_rows(ds) < 2 {
            return Err(Error::config("the diversity term needs at least 2 table rows"));
        }
        Ok(())
    }

    /// Rows of the anchor table for this variant.
    pub fn table_rows(&self, ds: &Dataset) -> usize {
        match self.variant {
            Variant::IconeClass => ds.num_classes,
            Variant::Unsupervised | Variant::IconeInstance => ds.train.len(),
        }
    }

    pub fn total_steps(&self, ds: &Dataset) -> usize {
        self.epochs * ds.train.len().div_ceil(self.batch_size)
    }
}

/// `0.5 · base · (1 + cos(π · step / total))`, never negative.
pub fn cosine_lr(step: usize, total_steps: usize, base: f64) -> f64 {
    if total_steps == 0 {
        return base;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    (0.5 * base * (1.0 + (PI * frac).cos())).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay on parameters
/// flagged `decay`. Non-finite gradients abort before anything is modified.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [ParamMut<'_>],
    grads: &[&Tensor],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!("gradient {:?} for {} {:?}", g.shape(), p.name, p.value.shape())));
        }
        if !g.all_finite() {
            return Err(Error::numerical(format!("non-finite gradient for parameter {}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.decay { lr * weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *x -= decay * *x;
            *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
        if !p.value.all_finite() {
            return Err(Error::numerical(format!("parameter {} became non-finite", p.name)));
        }
    }
    Ok(())
}

/// Embeddings of every dataset instance at the end of `epoch`, with the
/// parameters that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    /// `[N × d]`, rows indexed by instance id.
    pub embeddings: Tensor,
    pub model: Model,
}

impl Snapshot {
    /// Writes `instance_id,label,z0..z{d−1}` for the given ids.
    pub fn write_csv<W: Write>(&self, mut w: W, ds: &Dataset, ids: &[usize]) -> Result<()> {
        let d = self.embeddings.cols();
        let header: Vec<String> = (0..d).map(|k| format!("z{k}")).collect();
        writeln!(w, "instance_id,label,{}", header.join(","))?;
        for &i in ids {
            let row: Vec<String> = self.embeddings.row(i).iter().map(f64::to_string).collect();
            writeln!(w, "{i},{},{}", ds.labels[i], row.join(","))?;
        }
        Ok(())
    }
}

/// Reads a snapshot CSV into a full `[N × d]` table for a dataset of `n`
/// instances; ids absent from the file stay zero and are reported in the
/// returned mask.
pub fn read_snapshot_csv<R: std::io::Read>(r: R, n: usize) -> Result<(Tensor, Vec<bool>)> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers().map_err(data::csv_err)?.clone();
    let d = header.len().saturating_sub(2);
    if d == 0 || &header[0] != "instance_id" || &header[1] != "label" {
        return Err(Error::Parse(format!("unexpected snapshot header {header:?}")));
    }
    let mut values = vec![0.0; n * d];
    let mut present = vec![false; n];
    for rec in rdr.records() {
        let rec = rec.map_err(data::csv_err)?;
        let id: usize = data::parse(&rec[0])?;
        if id >= n {
            return Err(Error::Parse(format!("instance_id {id} outside dataset of {n}")));
        }
        for k in 0..d {
            values[id * d + k] = data::parse(&rec[k + 2])?;
        }
        present[id] = true;
    }
    Ok((Tensor::new(vec![n, d], values)?, present))
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: TrainConfig,
    /// Per-epoch means of the step losses.
    pub curves: Vec<LossBreakdown>,
    pub snapshots: Vec<Snapshot>,
    pub model: Model,
}

impl RunArtifacts {
    pub fn final_embeddings(&self, ds: &Dataset) -> Result<Tensor> {
        self.model.encoder.encode_values(&ds.points)
    }

    pub fn write_curves_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,l_vv,l_vi,l_div,total")?;
        for (e, c) in self.curves.iter().enumerate() {
            writeln!(w, "{e},{},{},{},{}", c.l_vv, c.l_vi, c.l_div, c.total)?;
        }
        Ok(())
    }
}

/// Fresh encoder and table for `cfg`; deterministic in `cfg.seed`.
pub fn init_model(ds: &Dataset, cfg: &TrainConfig) -> Result<Model> {
    let in_dim = ds.points.cols();
    Ok(Model {
        encoder: MlpEncoder::new(in_dim, cfg.out_dim, cfg.seed)?,
        table: EmbeddingTable::init(cfg.table_rows(ds), cfg.out_dim, cfg.init_sigma, cfg.seed)?,
    })
}

/// Class of each table row for `cfg.variant`.
pub fn row_labels(ds: &Dataset, cfg: &TrainConfig) -> Vec<usize> {
    match cfg.variant {
        Variant::IconeClass => (0..ds.num_classes).collect(),
        _ => ds.labels_of(&ds.train),
    }
}

/// Trains on the training split of `ds`.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<RunArtifacts> {
    train_observed(ds, cfg, |_, _| {})
}

/// [`train`], calling `on_epoch(epoch, mean_losses)` after every epoch.
pub fn train_observed(
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<RunArtifacts> {
    cfg.validate(ds)?;
    let mut model = init_model(ds, cfg)?;
    let sizes: Vec<usize> = model.parameters().iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::new(&sizes);
    let loss_cfg = cfg.loss_config();
    let rank = ds.train_rank();
    let rows = row_labels(ds, cfg);
    let total_steps = cfg.total_steps(ds);

    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::with_capacity(cfg.snapshot_epochs.len());
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut acc = [0.0; 4];
        let epoch_batches = data::batches(&ds.train, cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch as u64))?;
        let n_batches = epoch_batches.len();
        for batch in epoch_batches {
            let lr = match cfg.schedule {
                Schedule::Constant => cfg.lr,
                Schedule::Cosine => cosine_lr(step, total_steps, cfg.lr),
            };
            let ids: Vec<usize> =
                batch.iter().map(|&i| rank[i].expect("batch ids come from the train split")).collect();
            let labels = ds.labels_of(&batch);
            let views = data::augment(
                &ds.gather(&batch),
                cfg.views,
                cfg.sigma_aug,
                derive_seed(cfg.seed, "augment", step as u64),
            )?;
            let targets = BatchTargets {
                ids: &ids,
                labels: Some(&labels),
                row_labels: Some(&rows),
                step_seed: derive_seed(cfg.seed, "sigreg", step as u64),
            };
            let parts = optimize_step(&mut model, &mut adam, &loss_cfg, &views, &targets, lr, cfg.weight_decay)?;
            for (a, v) in acc.iter_mut().zip([parts.l_vv, parts.l_vi, parts.l_div, parts.total]) {
                *a += v;
            }
            step += 1;
        }
        let nb = n_batches as f64;
        let mean = LossBreakdown { l_vv: acc[0] / nb, l_vi: acc[1] / nb, l_div: acc[2] / nb, total: acc[3] / nb };
        curves.push(mean);
        on_epoch(epoch, &mean);
        if cfg.snapshot_epochs.contains(&epoch) {
            snapshots.push(Snapshot {
                epoch,
                embeddings: model.encoder.encode_values(&ds.points)?,
                model: model.clone(),
            });
        }
    }
    Ok(RunArtifacts { config: cfg.clone(), curves, snapshots, model })
}

/// Forward, backward and one optimizer update on `views: [B × V × in]`.
pub fn optimize_step(
    model: &mut Model,
    adam: &mut AdamState,
    loss_cfg: &LossConfig,
    views: &Tensor,
    targets: &BatchTargets<'_>,
    lr: f64,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    let (parts, grads) = loss_and_gradients(model, loss_cfg, views, targets)?;
    let refs: Vec<&Tensor> = grads.iter().collect();
    let mut params = model.parameters_mut();
    adam_step(adam, &mut params, &refs, lr, weight_decay)?;
    Ok(parts)
}

/// Loss terms and gradients for every parameter in [`Model::parameters`] order.
pub fn loss_and_gradients(
    model: &Model,
    loss_cfg: &LossConfig,
    views: &Tensor,
    targets: &BatchTargets<'_>,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let [b, v, in_dim] = views.shape()[..] else {
        return Err(Error::shape(format!("views must be [B × V × in], got {:?}", views.shape())));
    };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let x = tape.constant(views.clone().reshape(vec![b * v, in_dim])?);
    let z = bound.encoder.encode(x)?.reshape(vec![b, v, model.encoder.out_dim()])?;
    let (total, parts) = losses::total_loss(loss_cfg, z, bound.table, targets)?;
    if !parts.total.is_finite() {
        return Err(Error::numerical(format!("non-finite loss {parts:?}")));
    }
    let grads = tape.backward(total)?;
    let names = model.parameters();
    bound
        .params()
        .into_iter()
        .zip(names)
        .map(|(p, (name, t))| match grads.wrt(p) {
            Some(g) => Ok(g.clone()),
            None => Err(Error::Contract(format!("no gradient recorded for {name} {:?}", t.shape()))),
        })
        .collect::<Result<Vec<_>>>()
        .map(|g| (parts, g))
}
