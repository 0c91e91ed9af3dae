//! Sketched Gaussianity test on the embedding table.
//!
//! The table is standardized per dimension, projected on `M` random unit
//! directions, and each 1-D projection is scored by the weighted squared
//! distance between its empirical characteristic function and that of
//! `N(0, 1)`:
//!
//! `T_m = N ∫_{-R}^{R} |φ̂_m(t) − e^{−t²/2}|² e^{−t²/2} dt`, `L = mean_m T_m`.
//!
//! The integral uses the trapezoidal rule on `P` uniform points. The
//! integrand is even in `t`, so only non-negative nodes are evaluated and
//! `cos/sin(t z)` along the grid is advanced by angle-addition recurrences.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SigRegParams {
    pub num_projections: usize,
    /// Integration limit `R`.
    pub half_width: f64,
    /// Number of trapezoid nodes `P` on `[-R, R]`.
    pub points: usize,
}

impl Default for SigRegParams {
    fn default() -> Self {
        Self { num_projections: 64, half_width: 5.0, points: 101 }
    }
}

impl SigRegParams {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 {
            return Err(Error::config(format!("sigreg grid needs at least 3 points, got {}", self.points)));
        }
        if self.num_projections == 0 {
            return Err(Error::config("sigreg needs at least one projection"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::config("sigreg half width must be positive"));
        }
        Ok(())
    }
}

/// Folded quadrature over the non-negative nodes: `(t, weight · e^{−t²/2})`.
fn folded_nodes(params: &SigRegParams) -> Vec<(f64, f64)> {
    let p = params.points;
    let r = params.half_width;
    let h = 2.0 * r / (p - 1) as f64;
    let mut weights = vec![0.0; p];
    for (k, w) in weights.iter_mut().enumerate() {
        *w = if k == 0 || k == p - 1 { 0.5 * h } else { h };
    }
    let mut folded = vec![0.0; p];
    for (k, &w) in weights.iter().enumerate() {
        let mirror = p - 1 - k;
        // node k sits at -R + k·h; negative nodes fold onto their mirror
        let target = if 2 * k + 1 < p { mirror } else { k };
        folded[target] += w;
    }
    (0..p)
        .filter(|&k| folded[k] > 0.0)
        .map(|k| {
            let t = -r + k as f64 * h;
            (t, folded[k] * (-0.5 * t * t).exp())
        })
        .collect()
}

/// Mean statistic over the columns of `proj: [n × m]` and its gradient.
pub fn sigreg_statistic(proj: &[f64], n: usize, m: usize, params: &SigRegParams) -> Result<(f64, Vec<f64>)> {
    params.validate()?;
    if proj.len() != n * m || n == 0 {
        return Err(Error::shape(format!("{} projected values for {n}×{m}", proj.len())));
    }
    let nodes = folded_nodes(params);
    let q = nodes.len();
    let step = if q > 1 { nodes[1].0 - nodes[0].0 } else { 0.0 };
    let t0 = nodes[0].0;
    let nf = n as f64;

    let mut total = 0.0;
    let mut grad = vec![0.0; n * m];
    let mut z = vec![0.0; n];
    let (mut c, mut s) = (vec![0.0; n], vec![0.0; n]);
    let (mut rc, mut rs) = (vec![0.0; n], vec![0.0; n]);
    let mut cos_tab = vec![0.0; q * n];
    let mut sin_tab = vec![0.0; q * n];
    let mut coef = vec![(0.0, 0.0); q];

    for col in 0..m {
        for i in 0..n {
            z[i] = proj[i * m + col];
            (s[i], c[i]) = (t0 * z[i]).sin_cos();
            (rs[i], rc[i]) = (step * z[i]).sin_cos();
        }
        let mut t_stat = 0.0;
        for (k, &(t, w)) in nodes.iter().enumerate() {
            let (ck, sk) = (&mut cos_tab[k * n..(k + 1) * n], &mut sin_tab[k * n..(k + 1) * n]);
            ck.copy_from_slice(&c);
            sk.copy_from_slice(&s);
            let re = c.iter().sum::<f64>() / nf;
            let im = s.iter().sum::<f64>() / nf;
            let gauss = (-0.5 * t * t).exp();
            t_stat += w * ((re - gauss).powi(2) + im * im);
            coef[k] = (2.0 * w * t * im, -2.0 * w * t * (re - gauss));
            for i in 0..n {
                let (ci, si) = (c[i], s[i]);
                c[i] = ci * rc[i] - si * rs[i];
                s[i] = si * rc[i] + ci * rs[i];
            }
        }
        total += nf * t_stat;
        for (k, &(a, b)) in coef.iter().enumerate() {
            let (ck, sk) = (&cos_tab[k * n..(k + 1) * n], &sin_tab[k * n..(k + 1) * n]);
            for i in 0..n {
                grad[i * m + col] += (a * ck[i] + b * sk[i]) / m as f64;
            }
        }
    }
    Ok((total / m as f64, grad))
}

/// `M` unit directions in `R^d`, deterministic in `seed`.
pub fn sample_directions(d: usize, m: usize, seed: u64) -> Tensor {
    let mut rng = rng::stream(seed, "sigreg");
    let mut cols = vec![0.0; d * m];
    for j in 0..m {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        v.iter_mut().for_each(|x| *x /= norm);
        for i in 0..d {
            cols[i * m + j] = v[i];
        }
    }
    Tensor::new(vec![d, m], cols).expect("direction shape")
}

const STANDARDIZE_EPS: f64 = 1e-8;

/// SIGReg penalty on a raw `[n × d]` table; directions drawn from `seed`.
pub fn loss_sigreg<'t>(table: Var<'t>, params: &SigRegParams, seed: u64) -> Result<Var<'t>> {
    params.validate()?;
    let shape = table.shape();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::config(format!("sigreg needs a table with at least 2 rows, got {shape:?}")));
    }
    let (n, d) = (shape[0], shape[1]);
    let tape: &'t Tape = table.tape();
    let centered = table.sub_row(table.col_mean())?;
    let std = centered.square().col_mean().scale(n as f64 / (n - 1) as f64).add_scalar(STANDARDIZE_EPS).sqrt()?;
    let standardized = centered.div_row(std)?;
    let dirs = tape.constant(sample_directions(d, params.num_projections, seed));
    let proj = standardized.matmul(dirs)?;
    let (value, grad) = proj.with_value(|p| sigreg_statistic(p.data(), n, params.num_projections, params))?;
    tape.scalar_fn(proj, value, grad)
}
