//! Spectral collapse indicators: effective rank, RankMe and LiDAR.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

use super::check_matrix;

pub const LIDAR_DELTA: f64 = 1e-4;

/// `exp(H(p))` with `p = s / Σs`; an all-zero spectrum counts as rank 1.
pub fn entropy_rank(spectrum: &[f64]) -> f64 {
    let total: f64 = spectrum.iter().map(|s| s.max(0.0)).sum();
    if total <= 0.0 {
        return 1.0;
    }
    let h: f64 = spectrum.iter().map(|s| s.max(0.0) / total).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.exp()
}

/// Entropy rank of the singular values of `z` after centering its columns.
pub fn effective_rank(z: &Tensor) -> Result<f64> {
    let (n, d) = check_matrix(z, z.rows())?;
    if n < 2 {
        return Err(Error::config("effective rank needs at least 2 rows"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(z.row(i)).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<f64> =
        (0..n).flat_map(|i| z.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect::<Vec<_>>()).collect();
    Ok(entropy_rank(&linalg::singular_values(&centered, n, d)?))
}

/// Entropy rank of the singular values of `z` as given (no centering).
pub fn rankme(z: &Tensor) -> Result<f64> {
    let (n, d) = check_matrix(z, z.rows())?;
    if n == 0 {
        return Err(Error::config("rankme needs at least 1 row"));
    }
    Ok(entropy_rank(&linalg::singular_values(z.data(), n, d)?))
}

/// Between-instance and within-instance scatter of `views: [N × V × d]`.
pub fn lidar_scatter(views: &Tensor, delta: f64) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let [n, v, d] = views.shape()[..] else {
        return Err(Error::shape(format!("views must be [N × V × d], got {:?}", views.shape())));
    };
    if v < 2 || n == 0 {
        return Err(Error::config("LiDAR needs at least 2 views per instance"));
    }
    let data = views.data();
    let mut means = vec![0.0; n * d];
    for i in 0..n {
        for m in 0..v {
            let r = &data[(i * v + m) * d..(i * v + m + 1) * d];
            means[i * d..(i + 1) * d].iter_mut().zip(r).for_each(|(a, x)| *a += x / v as f64);
        }
    }
    let mut global = vec![0.0; d];
    for i in 0..n {
        global.iter_mut().zip(&means[i * d..(i + 1) * d]).for_each(|(g, x)| *g += x / n as f64);
    }
    let mut sb = vec![0.0; d * d];
    let mut sw = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let mu = &means[i * d..(i + 1) * d];
        diff.iter_mut().enumerate().for_each(|(k, x)| *x = mu[k] - global[k]);
        outer_acc(&mut sb, &diff, 1.0 / n as f64);
        for m in 0..v {
            let r = &data[(i * v + m) * d..(i * v + m + 1) * d];
            diff.iter_mut().enumerate().for_each(|(k, x)| *x = r[k] - mu[k]);
            outer_acc(&mut sw, &diff, 1.0 / (n * v) as f64);
        }
    }
    for k in 0..d {
        sw[k * d + k] += delta;
    }
    Ok((sb, sw, d))
}

fn outer_acc(acc: &mut [f64], x: &[f64], w: f64) {
    let d = x.len();
    for a in 0..d {
        for b in 0..d {
            acc[a * d + b] += w * x[a] * x[b];
        }
    }
}

/// Entropy rank of the eigenvalues of `Σ_w^{-1/2} Σ_b Σ_w^{-1/2}`.
pub fn lidar(views: &Tensor, delta: f64) -> Result<f64> {
    let (sb, sw, d) = lidar_scatter(views, delta)?;
    let w = linalg::inverse_sqrt_spd(&sw, d)
        .map_err(|e| Error::numerical(format!("within-instance scatter is singular despite delta = {delta}: {e}")))?;
    let m = linalg::matmul_square(&linalg::matmul_square(&w, &sb, d), &w, d);
    // symmetrize away round-off before the eigen solve
    let mut sym = m.clone();
    for a in 0..d {
        for b in 0..d {
            sym[a * d + b] = 0.5 * (m[a * d + b] + m[b * d + a]);
        }
    }
    let eig = linalg::symmetric_eigen(&sym, d)?;
    Ok(entropy_rank(&eig.values))
}
