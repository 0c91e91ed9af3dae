//! Cluster and hypersphere geometry: silhouette, alignment, uniformity.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

use super::check_matrix;

/// Pair sets up to this many points are enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 2000;
pub const SAMPLED_PAIRS: usize = 100_000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean silhouette coefficient with Euclidean distances.
pub fn silhouette(z: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_matrix(z, labels.len())?;
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; c];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present: Vec<usize> = (0..c).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return Err(Error::config("silhouette needs at least 2 classes"));
    }
    if let Some(&k) = present.iter().find(|&&k| counts[k] < 2) {
        return Err(Error::config(format!("silhouette: class {k} has a single member")));
    }
    let mut sums = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(z.row(i), z.row(j)).sqrt();
            }
        }
        let own = labels[i];
        let a = sums[own] / (counts[own] - 1) as f64;
        let b =
            present.iter().filter(|&&k| k != own).map(|&k| sums[k] / counts[k] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(total / n as f64)
}

/// Mean of `‖z_x − z_y‖^alpha` over unordered same-class pairs.
pub fn alignment_same_class(z: &Tensor, labels: &[usize], alpha: f64, seed: u64) -> Result<f64> {
    let (n, _) = check_matrix(z, labels.len())?;
    let f = |i: usize, j: usize| sq_dist(z.row(i), z.row(j)).powf(alpha / 2.0);
    if n <= EXHAUSTIVE_LIMIT {
        let (mut acc, mut count) = (0.0, 0usize);
        for i in 0..n {
            for j in i + 1..n {
                if labels[i] == labels[j] {
                    acc += f(i, j);
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::config("no same-class pairs for alignment"));
        }
        return Ok(acc / count as f64);
    }
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    labels.iter().enumerate().for_each(|(i, &l)| members[l].push(i));
    // sample a class proportionally to its pair count, then a pair within it
    let weights: Vec<f64> = members.iter().map(|m| (m.len() * m.len().saturating_sub(1)) as f64).collect();
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::config("no same-class pairs for alignment"));
    }
    let mut rng = rng::stream(seed, "alignment");
    let mut acc = 0.0;
    for _ in 0..SAMPLED_PAIRS {
        let mut u = rng.random_range(0.0..total);
        let k = weights.iter().position(|&w| {
            u -= w;
            u < 0.0
        });
        let m = &members[k.unwrap_or(c - 1)];
        let a = rng.random_range(0..m.len());
        let mut b = rng.random_range(0..m.len() - 1);
        if b >= a {
            b += 1;
        }
        acc += f(m[a], m[b]);
    }
    Ok(acc / SAMPLED_PAIRS as f64)
}

/// Mean of `‖z^(m) − z^(n)‖^alpha` over view pairs of each instance;
/// `views` is `[N × V × d]`.
pub fn alignment_views(views: &Tensor, alpha: f64) -> Result<f64> {
    let [n, v, d] = views.shape()[..] else {
        return Err(Error::shape(format!("views must be [N × V × d], got {:?}", views.shape())));
    };
    if v < 2 || n == 0 {
        return Err(Error::config("augmentation alignment needs at least 2 views"));
    }
    let data = views.data();
    let row = |i: usize, m: usize| &data[(i * v + m) * d..(i * v + m + 1) * d];
    let (mut acc, mut count) = (0.0, 0usize);
    for i in 0..n {
        for a in 0..v {
            for b in a + 1..v {
                acc += sq_dist(row(i, a), row(i, b)).powf(alpha / 2.0);
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// `log mean exp(−t‖z_x − z_y‖²)` over distinct pairs.
pub fn uniformity(z: &Tensor, t: f64, seed: u64) -> Result<f64> {
    let (n, _) = check_matrix(z, z.rows())?;
    if n < 2 {
        return Err(Error::config("uniformity needs at least 2 points"));
    }
    let mut exps: Vec<f64> = Vec::new();
    if n <= EXHAUSTIVE_LIMIT {
        exps.reserve(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                exps.push(-t * sq_dist(z.row(i), z.row(j)));
            }
        }
    } else {
        let mut rng = rng::stream(seed, "uniformity");
        for _ in 0..SAMPLED_PAIRS {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            exps.push(-t * sq_dist(z.row(a), z.row(b)));
        }
    }
    let max = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = exps.iter().map(|e| (e - max).exp()).sum();
    Ok(max + (s / exps.len() as f64).ln())
}
