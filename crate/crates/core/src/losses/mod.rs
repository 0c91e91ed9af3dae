//! Training objectives: view-view consistency, view-instance alignment,
//! and the dataset-level diversity regularizers on the anchor table.

pub mod diversity;
pub mod sigreg;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::NORM_EPS;
use crate::tensor::Tensor;

pub use sigreg::{loss_sigreg, SigRegParams};

/// Per-term loss values of one step. Disabled terms are reported as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_vv: f64,
    pub l_vi: f64,
    pub l_div: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(l_vv: f64, l_vi: f64, l_div: f64) -> Self {
        Self { l_vv, l_vi, l_div, total: l_vv + l_vi + l_div }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerChoice {
    #[default]
    Orthogonality,
    #[serde(rename = "vcreg")]
    VcReg,
    #[serde(rename = "sigreg")]
    SigReg,
    None,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One anchor per training instance.
    #[default]
    Unsupervised,
    /// One prototype per class; views align to their class prototype.
    IconeClass,
    /// Instance anchors, diversity penalty restricted to cross-class pairs.
    IconeInstance,
}

impl Variant {
    pub fn is_supervised(self) -> bool {
        !matches!(self, Variant::Unsupervised)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesEnabled {
    pub vv: bool,
    pub vi: bool,
    pub div: bool,
}

impl Default for LossesEnabled {
    fn default() -> Self {
        Self { vv: true, vi: true, div: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcRegParams {
    /// Target standard deviation.
    pub gamma: f64,
    pub eps: f64,
    pub lam_var: f64,
    pub lam_cov: f64,
}

impl Default for VcRegParams {
    fn default() -> Self {
        Self { gamma: 1.0, eps: 1e-4, lam_var: 1.0, lam_cov: 1.0 }
    }
}

/// Everything that selects and parameterizes the objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub enabled: LossesEnabled,
    pub regularizer: RegularizerChoice,
    pub variant: Variant,
    pub vcreg: VcRegParams,
    pub sigreg: SigRegParams,
}

fn views_dims(views: Var<'_>) -> Result<(usize, usize, usize)> {
    match views.shape()[..] {
        [b, v, d] => Ok((b, v, d)),
        ref s => Err(Error::shape(format!("views must be [B × V × d], got {s:?}"))),
    }
}

/// Mean over instances and view pairs `m < n` of `1 − ⟨z^(m), z^(n)⟩`.
pub fn loss_vv<'t>(views: Var<'t>) -> Result<Var<'t>> {
    let (b, v, _) = views_dims(views)?;
    if v < 2 {
        return Err(Error::config(format!("view-view loss needs at least 2 views, got {v}")));
    }
    let mut left = Vec::with_capacity(b * v * (v - 1) / 2);
    let mut right = Vec::with_capacity(left.capacity());
    for i in 0..b {
        for m in 0..v {
            for n in m + 1..v {
                left.push(i * v + m);
                right.push(i * v + n);
            }
        }
    }
    let dots = views.gather_rows(&left)?.row_dot(views.gather_rows(&right)?)?;
    Ok(dots.mean().neg().add_scalar(1.0))
}

/// Mean over instances and views of `1 − ⟨z_i^(v), ẽ_i⟩`; `anchors` is `[B × d]`.
pub fn loss_vi<'t>(views: Var<'t>, anchors: Var<'t>) -> Result<Var<'t>> {
    let (b, v, d) = views_dims(views)?;
    if anchors.shape() != [b, d] {
        return Err(Error::shape(format!("anchors {:?} do not match views [{b} × {v} × {d}]", anchors.shape())));
    }
    let repeat: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, v)).collect();
    let flat = views.reshape(vec![b * v, d])?;
    let dots = flat.row_dot(anchors.gather_rows(&repeat)?)?;
    Ok(dots.mean().neg().add_scalar(1.0))
}

/// Squared-hinge orthogonality penalty over every row of the normalized
/// table (`[N × d]`), optionally restricted to pairs with different
/// `row_classes`.
pub fn loss_div_ortho<'t>(normalized: Var<'t>, row_classes: Option<&[usize]>) -> Result<Var<'t>> {
    let shape = normalized.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("table must be a matrix, got {shape:?}")));
    }
    let (loss, grad) = normalized.with_value(|v| diversity::ortho_hinge(v.data(), shape[0], shape[1], row_classes))?;
    normalized.tape().scalar_fn(normalized, loss, grad)
}

/// Variance hinge plus off-diagonal covariance penalty on the normalized table.
pub fn loss_vcreg<'t>(normalized: Var<'t>, params: &VcRegParams) -> Result<Var<'t>> {
    let shape = normalized.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::config(format!("vcreg needs a table with at least 2 rows, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let unbias = 1.0 / (n - 1) as f64;
    let centered = normalized.sub_row(normalized.col_mean())?;
    let var = centered.square().col_mean().scale(n as f64 * unbias);
    let std = var.add_scalar(params.eps).sqrt()?;
    let var_term = std.neg().add_scalar(params.gamma).hinge().sum().scale(params.lam_var);

    let cov = centered.transpose()?.matmul(centered)?.scale(unbias);
    let mut mask = Tensor::full(vec![d, d], 1.0);
    for j in 0..d {
        mask.data_mut()[j * d + j] = 0.0;
    }
    let off = cov.mul(normalized.tape().constant(mask))?;
    let cov_term = off.square().sum().scale(params.lam_cov);
    var_term.add(cov_term)
}

/// Instance ids and labels for one batch, plus per-row labels of the table
/// for the supervised variants.
#[derive(Debug, Clone, Copy)]
pub struct BatchTargets<'a> {
    /// Table row of each batch instance.
    pub ids: &'a [usize],
    /// Class of each batch instance.
    pub labels: Option<&'a [usize]>,
    /// Class of each table row.
    pub row_labels: Option<&'a [usize]>,
    /// Seed for stochastic regularizers (SIGReg directions).
    pub step_seed: u64,
}

/// Assembles the enabled terms into a differentiable total.
///
/// `views` is `[B × V × d]` of unit-norm encoder outputs, `table` the raw
/// (unnormalized) anchor parameters.
pub fn total_loss<'t>(
    cfg: &LossConfig,
    views: Var<'t>,
    table: Var<'t>,
    targets: &BatchTargets<'_>,
) -> Result<(Var<'t>, LossBreakdown)> {
    let (b, _, _) = views_dims(views)?;
    if targets.ids.len() != b {
        return Err(Error::shape(format!("{} ids for a batch of {b}", targets.ids.len())));
    }
    if !(cfg.enabled.vv || cfg.enabled.vi || cfg.enabled.div) {
        return Err(Error::config("no loss term enabled"));
    }
    let anchor_rows: &[usize] = match cfg.variant {
        Variant::Unsupervised | Variant::IconeInstance => targets.ids,
        Variant::IconeClass => targets.labels.ok_or_else(|| Error::config("icone_class needs batch labels"))?,
    };
    let mask = match cfg.variant {
        Variant::IconeInstance => {
            Some(targets.row_labels.ok_or_else(|| Error::config("icone_instance needs table row labels"))?)
        }
        _ => None,
    };

    let normalized = table.l2_normalize_rows(NORM_EPS);
    let mut terms: Vec<Var<'t>> = Vec::with_capacity(3);
    let mut parts = [0.0; 3];
    if cfg.enabled.vv {
        let l = loss_vv(views)?;
        parts[0] = l.item()?;
        terms.push(l);
    }
    if cfg.enabled.vi {
        let l = loss_vi(views, normalized.gather_rows(anchor_rows)?)?;
        parts[1] = l.item()?;
        terms.push(l);
    }
    if cfg.enabled.div {
        let l = match cfg.regularizer {
            RegularizerChoice::Orthogonality => Some(loss_div_ortho(normalized, mask)?),
            RegularizerChoice::VcReg => Some(loss_vcreg(normalized, &cfg.vcreg)?),
            RegularizerChoice::SigReg => Some(loss_sigreg(table, &cfg.sigreg, targets.step_seed)?),
            RegularizerChoice::None => None,
        };
        if let Some(l) = l {
            parts[2] = l.item()?;
            terms.push(l);
        }
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Err(Error::config("regularizer none with only the diversity term leaves no loss"));
    };
    let mut total = first;
    for t in rest {
        total = total.add(*t)?;
    }
    Ok((total, LossBreakdown::from_terms(parts[0], parts[1], parts[2])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn views_of<'a>(tape: &'a Tape, rows: &[[f64; 2]], b: usize, v: usize) -> Var<'a> {
        let data = rows.iter().flatten().copied().collect();
        tape.constant(Tensor::new(vec![b, v, 2], data).unwrap())
    }

    #[test]
    fn vv_hand_cases() {
        let tape = Tape::new();
        let same = views_of(&tape, &[[0.6, 0.8]; 3], 1, 3);
        assert!(loss_vv(same).unwrap().item().unwrap().abs() < 1e-15);
        let anti = views_of(&tape, &[[1.0, 0.0], [-1.0, 0.0]], 1, 2);
        assert_eq!(loss_vv(anti).unwrap().item().unwrap(), 2.0);
        let orth = views_of(&tape, &[[1.0, 0.0], [0.0, 1.0]], 1, 2);
        assert_eq!(loss_vv(orth).unwrap().item().unwrap(), 1.0);
        let single = views_of(&tape, &[[1.0, 0.0]], 1, 1);
        assert!(matches!(loss_vv(single), Err(Error::Config(_))));
    }

    #[test]
    fn vv_averages_pairs_then_instances() {
        // instance 0: views e1,e1,e2 -> pairs (0,0,1)->(1-1)+(1-0)+(1-0) = 2 over 3
        // instance 1: identical views -> 0
        let tape = Tape::new();
        let v = views_of(&tape, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]], 2, 3);
        let l = loss_vv(v).unwrap().item().unwrap();
        assert!((l - (2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn vi_hand_cases() {
        let tape = Tape::new();
        let v = views_of(&tape, &[[0.6, 0.8], [0.6, 0.8]], 1, 2);
        let a = tape.constant(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        assert!(loss_vi(v, a).unwrap().item().unwrap().abs() < 1e-15);
        let v = views_of(&tape, &[[1.0, 0.0], [-1.0, 0.0]], 1, 2);
        let a = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap());
        assert_eq!(loss_vi(v, a).unwrap().item().unwrap(), 1.0);
        let a2 = tape.constant(Tensor::zeros(vec![2, 2]));
        assert!(matches!(loss_vi(v, a2), Err(Error::Shape(_))));
    }

    #[test]
    fn vi_pulls_anchor_toward_view_mean() {
        let tape = Tape::new();
        let v = views_of(&tape, &[[0.0, 1.0], [0.6, 0.8]], 1, 2);
        let table = tape.param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let anchors = table.l2_normalize_rows(NORM_EPS);
        let g = tape.backward(loss_vi(v, anchors).unwrap()).unwrap();
        let g = g.wrt(table).unwrap().data().to_vec();
        // descent direction -g must point toward +y (the mean view direction)
        assert!(-g[1] > 0.0);
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn vcreg_cases() {
        let tape = Tape::new();
        let same = tape.constant(Tensor::from_rows(&vec![vec![0.6, 0.8]; 10]).unwrap());
        let l = loss_vcreg(same, &VcRegParams::default()).unwrap().item().unwrap();
        assert!((l - 2.0 * (1.0 - 1e-2)).abs() < 1e-12, "{l}");

        // ±1 columns with unit unbiased variance requires scaling by sqrt((n-1)/n)
        let n = 4.0f64;
        let s = ((n - 1.0) / n).sqrt();
        let rows = vec![vec![s, s], vec![s, -s], vec![-s, s], vec![-s, -s]];
        let t = tape.constant(Tensor::from_rows(&rows).unwrap());
        let params = VcRegParams { eps: 0.0, ..Default::default() };
        assert!(loss_vcreg(t, &params).unwrap().item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn total_reports_disabled_terms_as_zero() {
        let tape = Tape::new();
        let views = views_of(&tape, &[[1.0, 0.0], [0.0, 1.0]], 1, 2);
        let table = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap());
        let cfg = LossConfig { enabled: LossesEnabled { vv: true, vi: true, div: false }, ..Default::default() };
        let targets = BatchTargets { ids: &[0], labels: None, row_labels: None, step_seed: 0 };
        let (total, parts) = total_loss(&cfg, views, table, &targets).unwrap();
        assert_eq!(parts.l_div, 0.0);
        assert_eq!(parts.total, parts.l_vv + parts.l_vi);
        assert!((total.item().unwrap() - parts.total).abs() < 1e-15);
    }

    #[test]
    fn supervised_variants_need_labels() {
        let tape = Tape::new();
        let views = views_of(&tape, &[[1.0, 0.0], [0.0, 1.0]], 1, 2);
        let table = tape.param(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap());
        let targets = BatchTargets { ids: &[0], labels: None, row_labels: None, step_seed: 0 };
        for variant in [Variant::IconeClass, Variant::IconeInstance] {
            let cfg = LossConfig { variant, ..Default::default() };
            assert!(matches!(total_loss(&cfg, views, table, &targets), Err(Error::Config(_))));
        }
    }

    #[test]
    fn perfect_configuration_has_zero_total() {
        let tape = Tape::new();
        let views = views_of(&tape, &[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]], 2, 2);
        let table = tape.param(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap());
        let targets = BatchTargets { ids: &[0, 1], labels: None, row_labels: None, step_seed: 0 };
        let (_, parts) = total_loss(&LossConfig::default(), views, table, &targets).unwrap();
        assert_eq!(parts, LossBreakdown::default());
    }

    #[test]
    fn regularizer_names() {
        let r: RegularizerChoice = serde_json::from_str("\"vcreg\"").unwrap();
        assert_eq!(r, RegularizerChoice::VcReg);
        let v: Variant = serde_json::from_str("\"icone_class\"").unwrap();
        assert_eq!(v, Variant::IconeClass);
    }
}
