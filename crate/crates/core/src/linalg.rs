//! Small dense linear algebra: a GEMM wrapper and Jacobi-rotation
//! eigen/singular value routines sized for `d ≤ 64`.

use crate::error::{Error, Result};

/// `c[m×n] = op(a)[m×k] · op(b)[k×n] + beta · c`, all row-major.
///
/// With `a_trans`, `a` is stored as `[k×m]`; with `b_trans`, `b` is stored as `[n×k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements of the asserted slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Row-major `n×n`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition of the symmetric row-major `n×n` matrix `a`.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen> {
    if a.len() != n * n {
        return Err(Error::shape(format!("{} entries for a {n}×{n} matrix", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite entry in eigen input"));
    }
    let mut m = a.to_vec();
    // symmetrize against round-off in the caller's construction
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = s;
            m[j * n + i] = s;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = n < 2 || scale == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (m[p * n + p], m[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::numerical(format!("Jacobi eigen did not converge for n={n}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + dst] = v[k * n + src];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Singular values (descending) of a row-major `rows×cols` matrix by
/// one-sided Jacobi rotations on the columns of the smaller Gram side.
///
/// This is the Jacobi diagonalization of `XᵀX` carried out implicitly on `X`,
/// which keeps small singular values accurate to working precision.
pub fn singular_values(x: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if x.len() != rows * cols {
        return Err(Error::shape(format!("{} entries for {rows}×{cols}", x.len())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite entry in singular value input"));
    }
    // Work column-major on the orientation with fewer columns.
    let (n, p, cols_data) = if cols <= rows {
        let mut c = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                c[j * rows + i] = x[i * cols + j];
            }
        }
        (rows, cols, c)
    } else {
        (cols, rows, x.to_vec())
    };
    let mut a = cols_data;
    let col = |a: &[f64], j: usize| -> Vec<f64> { a[j * n..(j + 1) * n].to_vec() };

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for j in 0..p {
            for k in j + 1..p {
                let (cj, ck) = (col(&a, j), col(&a, k));
                let alpha: f64 = cj.iter().map(|v| v * v).sum();
                let beta: f64 = ck.iter().map(|v| v * v).sum();
                let gamma: f64 = cj.iter().zip(&ck).map(|(u, v)| u * v).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..n {
                    let (u, v) = (cj[i], ck[i]);
                    a[j * n + i] = c * u - s * v;
                    a[k * n + i] = s * u + c * v;
                }
            }
        }
        if !rotated {
            let mut sv: Vec<f64> =
                (0..p).map(|j| a[j * n..(j + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            return Ok(sv);
        }
    }
    Err(Error::numerical(format!("one-sided Jacobi did not converge for {rows}×{cols}")))
}

/// `S^{-1/2}` for a symmetric positive definite `n×n` matrix.
pub fn inverse_sqrt_spd(s: &[f64], n: usize) -> Result<Vec<f64>> {
    let eig = symmetric_eigen(s, n)?;
    if let Some(&bad) = eig.values.iter().find(|&&l| l <= 0.0) {
        return Err(Error::numerical(format!("matrix is not positive definite (eigenvalue {bad:e})")));
    }
    let mut out = vec![0.0; n * n];
    for (j, &l) in eig.values.iter().enumerate() {
        let w = 1.0 / l.sqrt();
        for r in 0..n {
            let vr = eig.vectors[r * n + j] * w;
            for c in 0..n {
                out[r * n + c] += vr * eig.vectors[c * n + j];
            }
        }
    }
    Ok(out)
}

/// Row-major product of two square `n×n` matrices.
pub fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    gemm(n, n, n, a, false, b, false, &mut c, 0.0);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..7 {
            let r: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut s = vec![0.0; n * n];
            gemm(n, n, n, &r, true, &r, false, &mut s, 0.0);
            let eig = symmetric_eigen(&s, n).unwrap();
            for w in eig.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            for i in 0..n {
                for j in 0..n {
                    let rec: f64 =
                        (0..n).map(|k| eig.vectors[i * n + k] * eig.values[k] * eig.vectors[j * n + k]).sum();
                    assert!((rec - s[i * n + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal_and_rank_one() {
        let x = [3.0, 0.0, 0.0, 0.0, 4.0, 0.0];
        let sv = singular_values(&x, 2, 3).unwrap();
        assert!((sv[0] - 4.0).abs() < 1e-14 && (sv[1] - 3.0).abs() < 1e-14);

        let x: Vec<f64> = (0..10).flat_map(|i| [i as f64, 2.0 * i as f64]).collect();
        let sv = singular_values(&x, 10, 2).unwrap();
        assert!(sv[1] < 1e-12 * sv[0]);
    }

    #[test]
    fn inverse_sqrt_squares_to_inverse() {
        let s = [4.0, 1.0, 1.0, 3.0];
        let r = inverse_sqrt_spd(&s, 2).unwrap();
        let r2 = matmul_square(&r, &r, 2);
        let prod = matmul_square(&r2, &s, 2);
        assert!((prod[0] - 1.0).abs() < 1e-12 && prod[1].abs() < 1e-12);
        assert!(inverse_sqrt_spd(&[1.0, 0.0, 0.0, -1.0], 2).is_err());
    }
}
