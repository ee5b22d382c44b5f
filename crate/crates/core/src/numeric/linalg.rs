//! Batched Cholesky solves for the small normal-equation systems of the
//! per-pixel projection.

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// In-place square-root-free Cholesky (LDLᵀ) factorization of the `n x n`
/// row-major matrix `a + ridge * I`. On return the strict lower triangle holds
/// the unit lower factor and the diagonal holds the pivots. Returns `false` on a
/// non-positive pivot.
pub fn cholesky_in_place(a: &mut [f64], n: usize, ridge: f64) -> bool {
    for i in 0..n {
        a[i * n + i] += ridge;
    }
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k] * a[k * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k] * a[k * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solve `L D Lᵀ z = b` for `ncols` right-hand sides stored row-major as `n x ncols`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], ncols: usize) {
    for c in 0..ncols {
        for i in 0..n {
            let mut s = b[i * ncols + c];
            for k in 0..i {
                s -= l[i * n + k] * b[k * ncols + c];
            }
            b[i * ncols + c] = s;
        }
        for i in 0..n {
            b[i * ncols + c] /= l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * ncols + c];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * ncols + c];
            }
            b[i * ncols + c] = s;
        }
    }
}

/// Factor every `D x D` block of `mats` (shape `[B, D, D]`) with `ridge` added
/// to the diagonal. The returned buffer holds the lower factors back to back.
pub fn cholesky_batch(mats: &Tensor, ridge: f64) -> Result<Vec<f64>> {
    let (batch, d) = square_batch_dims(mats)?;
    let mut factors = mats.data().to_vec();
    for (b, block) in factors.chunks_mut(d * d).enumerate() {
        if !cholesky_in_place(block, d, ridge) {
            return Err(Error::SingularBasis { index: b });
        }
    }
    debug_assert_eq!(factors.len(), batch * d * d);
    Ok(factors)
}

/// Solve `(M_b + ridge I) z_b = rhs_b` for every batch item.
///
/// `mats` is `[B, D, D]`, `rhs` is `[B, D, C]`; the result has the shape of `rhs`.
pub fn spd_solve_batch(mats: &Tensor, rhs: &Tensor, ridge: f64) -> Result<Tensor> {
    let factors = cholesky_batch(mats, ridge)?;
    solve_with_factors(&factors, mats.shape()[1], rhs)
}

pub(crate) fn solve_with_factors(factors: &[f64], d: usize, rhs: &Tensor) -> Result<Tensor> {
    let shape = rhs.shape();
    if shape.len() != 3 || shape[1] != d || shape[0] * d * d != factors.len() {
        return Err(Error::ShapeMismatch(format!(
            "right-hand side {:?} does not match {} factors of size {d}",
            shape,
            factors.len() / (d * d).max(1)
        )));
    }
    let ncols = shape[2];
    let mut out = rhs.clone();
    for (l, b) in factors
        .chunks(d * d)
        .zip(out.data_mut().chunks_mut(d * ncols))
    {
        cholesky_solve(l, d, b, ncols);
    }
    Ok(out)
}

fn square_batch_dims(mats: &Tensor) -> Result<(usize, usize)> {
    match *mats.shape() {
        [b, r, c] if r == c => Ok((b, r)),
        _ => Err(Error::ShapeMismatch(format!(
            "expected a [B, D, D] stack, got {:?}",
            mats.shape()
        ))),
    }
}

/// Whether the `rows x cols` matrix has full column rank, judged by a
/// LDLᵀ factorization of its Gram matrix with a relative pivot floor.
pub fn has_full_column_rank(a: &[f64], rows: usize, cols: usize, rel_tol: f64) -> bool {
    let mut gram = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            gram[i * cols + j] = (0..rows).map(|t| a[t * cols + i] * a[t * cols + j]).sum();
        }
    }
    let scale = (0..cols).map(|i| gram[i * cols + i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return false;
    }
    if !cholesky_in_place(&mut gram, cols, 0.0) {
        return false;
    }
    (0..cols).all(|i| gram[i * cols + i] > rel_tol * scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
                .unwrap();
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
            for r in col + 1..n {
                let f = a[r * n + col] / a[col * n + col];
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r * n + k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r * n + r];
        }
        x
    }

    fn random_spd(rng: &mut Rng, d: usize) -> Vec<f64> {
        let g: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| g[k * d + i] * g[k * d + j]).sum::<f64>()
                    + if i == j { 0.5 } else { 0.0 };
            }
        }
        m
    }

    #[test]
    fn identity_and_diagonal() {
        let m = Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rhs = Tensor::new(&[1, 2, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(spd_solve_batch(&m, &rhs, 0.0).unwrap().data(), &[2.0, 4.0]);

        let m = Tensor::new(&[1, 2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!(spd_solve_batch(&m, &rhs, 0.0).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn matches_gaussian_elimination() {
        let mut rng = Rng::new(11);
        let d = 3;
        for _ in 0..100 {
            let m = random_spd(&mut rng, d);
            let b: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let oracle = gauss_solve(m.clone(), b.clone(), d);
            let z = spd_solve_batch(
                &Tensor::new(&[1, d, d], m).unwrap(),
                &Tensor::new(&[1, d, 1], b).unwrap(),
                0.0,
            )
            .unwrap();
            let scale = oracle.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (z, o) in z.data().iter().zip(&oracle) {
                assert!((z - o).abs() <= 1e-10 * scale.max(1e-300), "{z} vs {o}");
            }
        }
    }

    #[test]
    fn residual_bound_with_ridge() {
        let mut rng = Rng::new(5);
        let (batch, d, c) = (50, 4, 3);
        let mut mats = Vec::new();
        for _ in 0..batch {
            mats.extend(random_spd(&mut rng, d));
        }
        let rhs: Vec<f64> = (0..batch * d * c).map(|_| rng.normal()).collect();
        let mats = Tensor::new(&[batch, d, d], mats).unwrap();
        let rhs = Tensor::new(&[batch, d, c], rhs).unwrap();
        let ridge = 1e-3;
        let z = spd_solve_batch(&mats, &rhs, ridge).unwrap();
        for b in 0..batch {
            let m = &mats.data()[b * d * d..(b + 1) * d * d];
            let zb = &z.data()[b * d * c..(b + 1) * d * c];
            let rb = &rhs.data()[b * d * c..(b + 1) * d * c];
            let norm = rb.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for i in 0..d {
                for k in 0..c {
                    let lhs: f64 = (0..d)
                        .map(|j| (m[i * d + j] + if i == j { ridge } else { 0.0 }) * zb[j * c + k])
                        .sum();
                    assert!((lhs - rb[i * c + k]).abs() <= 1e-9 * norm);
                }
            }
        }
    }

    #[test]
    fn singular_reports_index() {
        let m = Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let rhs = Tensor::new(&[2, 1, 1], vec![1.0, 1.0]).unwrap();
        match spd_solve_batch(&m, &rhs, 0.0) {
            Err(Error::SingularBasis { index }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(spd_solve_batch(&m, &rhs, 1e-6).is_ok());
    }

    #[test]
    fn column_rank_check() {
        assert!(has_full_column_rank(
            &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0],
            3,
            2,
            1e-12
        ));
        assert!(!has_full_column_rank(
            &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0],
            3,
            2,
            1e-12
        ));
    }
}
