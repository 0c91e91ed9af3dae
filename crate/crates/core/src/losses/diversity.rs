//! Squared-hinge orthogonality penalty over the full normalized table.
//!
//! `L = 1/P · Σ_{(i,j) allowed, i≠j} max(0, ⟨ẽ_i, ẽ_j⟩)²` where `P` is the
//! number of allowed ordered pairs (all pairs, or only cross-class pairs when
//! row classes are given). The gradient with respect to row `i` is
//! `4/P · Σ_j max(0, G_ij) ẽ_j = 4/P · M_i ẽ_i` with
//! `M_i = Σ_{j : G_ij > 0} ẽ_j ẽ_jᵀ`.
//!
//! For `d = 2` the set `{j : G_ij > 0}` is the open half circle around the
//! angle of `ẽ_i`, so sorting rows by angle lets every `M_i` be read from
//! prefix sums of outer products in `O(N log N)`. Other dimensions use the
//! dense `O(N²d)` pair loop.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};

/// Value and gradient (w.r.t. the normalized rows) of the diversity penalty.
pub fn ortho_hinge(rows: &[f64], n: usize, d: usize, classes: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    validate(rows, n, d, classes)?;
    if d == 2 {
        Ok(ortho_hinge_planar(rows, n, classes)?)
    } else {
        ortho_hinge_dense(rows, n, d, classes)
    }
}

fn validate(rows: &[f64], n: usize, d: usize, classes: Option<&[usize]>) -> Result<()> {
    if n < 2 {
        return Err(Error::config(format!("diversity loss needs at least 2 rows, got {n}")));
    }
    if rows.len() != n * d {
        return Err(Error::shape(format!("{} values for {n}×{d} table", rows.len())));
    }
    if let Some(c) = classes {
        if c.len() != n {
            return Err(Error::shape(format!("{} row classes for {n} rows", c.len())));
        }
    }
    Ok(())
}

fn pair_count(n: usize, classes: Option<&[usize]>) -> Result<f64> {
    let pairs = match classes {
        None => n * (n - 1),
        Some(c) => {
            let mut counts = std::collections::BTreeMap::new();
            for &k in c {
                *counts.entry(k).or_insert(0usize) += 1;
            }
            counts.values().map(|&m| m * (n - m)).sum()
        }
    };
    if pairs == 0 {
        return Err(Error::config("class-masked diversity loss has no cross-class pairs"));
    }
    Ok(pairs as f64)
}

/// Reference `O(N²d)` evaluation over explicit pairs; valid for any `d`.
pub fn ortho_hinge_dense(rows: &[f64], n: usize, d: usize, classes: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    validate(rows, n, d, classes)?;
    let scale = 1.0 / pair_count(n, classes)?;
    let mut sum = 0.0;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let ri = &rows[i * d..(i + 1) * d];
        for j in i + 1..n {
            if classes.is_some_and(|c| c[i] == c[j]) {
                continue;
            }
            let rj = &rows[j * d..(j + 1) * d];
            let g: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
            if g <= 0.0 {
                continue;
            }
            sum += 2.0 * g * g;
            let w = 4.0 * scale * g;
            for k in 0..d {
                grad[i * d + k] += w * rj[k];
                grad[j * d + k] += w * ri[k];
            }
        }
    }
    Ok((scale * sum, grad))
}

/// Outer-product window sums `(xx, xy, yy)` over the open half circle
/// around each member of `members` (indices into `rows`), self included.
fn half_circle_sums(rows: &[f64], members: &[usize]) -> Vec<[f64; 3]> {
    let m = members.len();
    let mut order: Vec<(f64, usize)> = members.iter().map(|&i| (rows[2 * i + 1].atan2(rows[2 * i]), i)).collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    // angles replicated at -2π, 0, +2π so every window is contiguous
    let mut angles = Vec::with_capacity(3 * m);
    let mut prefix = Vec::with_capacity(3 * m + 1);
    prefix.push([0.0; 3]);
    for shift in [-2.0 * PI, 0.0, 2.0 * PI] {
        for &(a, i) in &order {
            let (x, y) = (rows[2 * i], rows[2 * i + 1]);
            let last = prefix[prefix.len() - 1];
            prefix.push([last[0] + x * x, last[1] + x * y, last[2] + y * y]);
            angles.push(a + shift);
        }
    }

    // window bounds only move forward as the centre angle increases
    let mut out = vec![[0.0; 3]; rows.len() / 2];
    let (mut lo, mut hi) = (0, 0);
    for &(a, i) in &order {
        while angles[lo] <= a - FRAC_PI_2 {
            lo += 1;
        }
        while hi < angles.len() && angles[hi] < a + FRAC_PI_2 {
            hi += 1;
        }
        let (p, q) = (prefix[hi], prefix[lo]);
        out[i] = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
    }
    out
}

fn ortho_hinge_planar(rows: &[f64], n: usize, classes: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    let scale = 1.0 / pair_count(n, classes)?;
    let all: Vec<usize> = (0..n).collect();
    let mut window = half_circle_sums(rows, &all);

    match classes {
        // remove each row's own outer product
        None => {
            for (i, w) in window.iter_mut().enumerate() {
                let (x, y) = (rows[2 * i], rows[2 * i + 1]);
                w[0] -= x * x;
                w[1] -= x * y;
                w[2] -= y * y;
            }
        }
        // remove same-class contributions (self included)
        Some(c) => {
            let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, &k) in c.iter().enumerate() {
                groups.entry(k).or_default().push(i);
            }
            for members in groups.values() {
                let same = half_circle_sums(rows, members);
                for &i in members {
                    for k in 0..3 {
                        window[i][k] -= same[i][k];
                    }
                }
            }
        }
    }

    let mut sum = 0.0;
    let mut grad = vec![0.0; 2 * n];
    for (i, w) in window.iter().enumerate() {
        let (x, y) = (rows[2 * i], rows[2 * i + 1]);
        let mx = w[0] * x + w[1] * y;
        let my = w[1] * x + w[2] * y;
        // a quadratic form of a PSD window; clamp prefix-sum cancellation
        sum += (x * mx + y * my).max(0.0);
        grad[2 * i] = 4.0 * scale * mx;
        grad[2 * i + 1] = 4.0 * scale * my;
    }
    Ok((scale * sum, grad))
}
