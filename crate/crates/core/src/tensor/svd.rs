//! Truncated singular value decomposition via one-sided Jacobi rotations.
//!
//! The sweep runs on whichever side has the smaller Gram matrix (the input is
//! transposed when it is wider than tall), with a fixed lexicographic pair
//! order so results are bit-reproducible. All internal arithmetic is f64
//! regardless of the caller's element type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const REL_OFF_TOL: f64 = 1e-12;

/// Rank-r factorization `U · diag(S) · Vt` of a v×d matrix.
///
/// `S` is non-negative and non-increasing. Columns of `U` and rows of `Vt`
/// are orthonormal. Sign convention: the largest-magnitude entry of each `U`
/// column is non-negative (ties resolved toward the lowest row index), with
/// the matching `Vt` row flipped to compensate.
#[derive(Debug, Clone)]
pub struct SvdResult<T: Scalar> {
    pub u: Tensor<T>,
    pub s: Tensor<T>,
    pub vt: Tensor<T>,
}

impl<T: Scalar> SvdResult<T> {
    /// `U · diag(S) · Vt`, the reconstruction at the stored rank.
    pub fn reconstruct(&self) -> Result<Tensor<T>> {
        let (v, r) = self.u.dims2()?;
        let (_, d) = self.vt.dims2()?;
        let mut scaled = self.u.clone();
        for i in 0..v {
            for j in 0..r {
                let val = scaled.at(i, j) * self.s.data()[j];
                scaled.set(i, j, val);
            }
        }
        let _ = d;
        super::matmul(&scaled, &self.vt)
    }
}

/// Best rank-`r` factorization of `m`.
pub fn truncated_svd<T: Scalar>(m: &Tensor<T>, r: usize) -> Result<SvdResult<T>> {
    let (v, d) = m.dims2()?;
    let k = v.min(d);
    if r < 1 || r > k {
        return Err(Error::Parameter(format!(
            "svd rank {r} out of range for a {v}×{d} matrix (1..={k})"
        )));
    }

    // Sweep the side whose Gram matrix is smaller: transpose when wider than tall.
    let transpose = v < d;
    let work = if transpose {
        m.cast::<f64>().transpose()?
    } else {
        m.cast::<f64>()
    };
    let (rows, cols) = work.dims2()?;

    let (b, vmat, _sweeps) = jacobi_sweeps(work.data(), rows, cols)?;

    // Column norms are the singular values; normalized columns are the left factor.
    let sigma: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| b[i * cols + j] * b[i * cols + j]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &c| sigma[c].partial_cmp(&sigma[a]).unwrap().then(a.cmp(&c)));

    // Left factor of `work` (rows×r) and right factor (r×cols), rank-truncated.
    let mut wu = vec![0.0f64; rows * r];
    let mut wvt = vec![0.0f64; r * cols];
    let mut s = vec![0.0f64; r];
    for (new_j, &old_j) in order.iter().take(r).enumerate() {
        let sig = sigma[old_j];
        s[new_j] = sig;
        if sig > 0.0 {
            for i in 0..rows {
                wu[i * r + new_j] = b[i * cols + old_j] / sig;
            }
        }
        for i in 0..cols {
            wvt[new_j * cols + i] = vmat[i * cols + old_j];
        }
    }

    let (mut u, mut vt) = if transpose {
        // m = workᵀ = (wu · S · wvt)ᵀ, so U comes from wvtᵀ and Vt from wuᵀ.
        let mut u = vec![0.0f64; v * r];
        for i in 0..v {
            for j in 0..r {
                u[i * r + j] = wvt[j * cols + i];
            }
        }
        let mut vt = vec![0.0f64; r * d];
        for j in 0..r {
            for i in 0..d {
                vt[j * d + i] = wu[i * r + j];
            }
        }
        (u, vt)
    } else {
        (wu, wvt)
    };

    apply_sign_convention(&mut u, &mut vt, v, d, r);

    Ok(SvdResult {
        u: Tensor::new_unchecked(vec![v, r], u).cast::<T>(),
        s: Tensor::new_unchecked(vec![r], s).cast::<T>(),
        vt: Tensor::new_unchecked(vec![r, d], vt).cast::<T>(),
    })
}

/// Orthogonalize the columns of `a` (rows×cols, cols ≤ rows) in place,
/// accumulating the right-rotations into V. Returns (B, V, sweeps).
fn jacobi_sweeps(a: &[f64], rows: usize, cols: usize) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut b = a.to_vec();
    let mut v = vec![0.0f64; cols * cols];
    for i in 0..cols {
        v[i * cols + i] = 1.0;
    }

    for sweep in 0..MAX_SWEEPS {
        if off_diagonal_converged(&b, rows, cols) {
            return Ok((b, v, sweep));
        }
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let bp = b[i * cols + p];
                    let bq = b[i * cols + q];
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if apq == 0.0 {
                    continue;
                }
                if apq.abs() <= f64::EPSILON * (app * aqq).sqrt() {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut b, rows, cols, p, q, c, s);
                rotate_columns(&mut v, cols, cols, p, q, c, s);
            }
        }
    }
    if off_diagonal_converged(&b, rows, cols) {
        return Ok((b, v, MAX_SWEEPS));
    }
    Err(Error::Numerical(format!(
        "svd failed to converge after {MAX_SWEEPS} sweeps"
    )))
}

fn rotate_columns(m: &mut [f64], rows: usize, cols: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..rows {
        let mp = m[i * cols + p];
        let mq = m[i * cols + q];
        m[i * cols + p] = c * mp - s * mq;
        m[i * cols + q] = s * mp + c * mq;
    }
}

fn off_diagonal_converged(b: &[f64], rows: usize, cols: usize) -> bool {
    let mut off = 0.0;
    let mut diag = 0.0;
    for p in 0..cols {
        let mut app = 0.0;
        for i in 0..rows {
            app += b[i * cols + p] * b[i * cols + p];
        }
        diag += app * app;
        for q in (p + 1)..cols {
            let mut apq = 0.0;
            for i in 0..rows {
                apq += b[i * cols + p] * b[i * cols + q];
            }
            off += apq * apq;
        }
    }
    if diag == 0.0 {
        return true;
    }
    off.sqrt() <= REL_OFF_TOL * diag.sqrt()
}

fn apply_sign_convention(u: &mut [f64], vt: &mut [f64], u_rows: usize, vt_cols: usize, r: usize) {
    for j in 0..r {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for i in 0..u_rows {
            let x = u[i * r + j];
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..u_rows {
                u[i * r + j] = -u[i * r + j];
            }
            for i in 0..vt_cols {
                vt[j * vt_cols + i] = -vt[j * vt_cols + i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, matmul_nt};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, v: usize, d: usize) -> Tensor<f64> {
        let data = (0..v * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[v, d], data).unwrap()
    }

    fn orthonormality_defect(m: &Tensor<f64>, gram_of_rows: bool) -> f64 {
        let gram = if gram_of_rows {
            matmul_nt(m, m).unwrap()
        } else {
            matmul(&m.transpose().unwrap(), m).unwrap()
        };
        let k = gram.rows();
        let mut worst = 0.0f64;
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.at(i, j) - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix_is_its_own_svd() {
        let m = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let svd = truncated_svd(&m, 2).unwrap();
        assert!((svd.s.data()[0] - 3.0).abs() < 1e-12);
        assert!((svd.s.data()[1] - 2.0).abs() < 1e-12);
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!(svd.u.max_abs_diff(&eye) < 1e-12);
        assert!(svd.vt.max_abs_diff(&eye) < 1e-12);
    }

    #[test]
    fn full_rank_reconstruction_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(v, d) in &[(6, 4), (4, 6), (9, 9), (32, 16)] {
            let m = random_matrix(&mut rng, v, d);
            let svd = truncated_svd(&m, v.min(d)).unwrap();
            let rec = svd.reconstruct().unwrap();
            let err = sub_frob(&rec, &m) / m.frobenius_norm();
            assert!(err <= 1e-10, "{v}x{d}: rel err {err}");
        }
    }

    fn sub_frob(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn eckart_young_on_constructed_factors() {
        // m = 3·u₁w₁ᵀ + 1·u₂w₂ᵀ with orthonormal u's and w's, so σ = (3, 1).
        let u1 = [0.5, 0.5, 0.5, 0.5];
        let u2 = [0.5, -0.5, 0.5, -0.5];
        let w1 = [1.0 / 2.0f64.sqrt(), 1.0 / 2.0f64.sqrt(), 0.0];
        let w2 = [0.0, 0.0, 1.0];
        let mut data = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                data[i * 3 + j] = 3.0 * u1[i] * w1[j] + 1.0 * u2[i] * w2[j];
            }
        }
        let m = Tensor::from_vec(&[4, 3], data).unwrap();

        let full = truncated_svd(&m, 2).unwrap();
        let rec = full.reconstruct().unwrap();
        assert!(sub_frob(&rec, &m) <= 1e-10);

        let rank1 = truncated_svd(&m, 1).unwrap();
        let rec1 = rank1.reconstruct().unwrap();
        let err = sub_frob(&rec1, &m);
        assert!((err - 1.0).abs() <= 1e-8, "discarded σ₂ = 1, got error {err}");
    }

    #[test]
    fn eckart_young_identity_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let v = rng.random_range(2..=32);
            let d = rng.random_range(2..=16);
            let m = random_matrix(&mut rng, v, d);
            let k = v.min(d);
            let full = truncated_svd(&m, k).unwrap();
            let r = rng.random_range(1..=k);
            let trunc = truncated_svd(&m, r).unwrap();
            let rec = trunc.reconstruct().unwrap();
            let discarded: f64 = full.s.data()[r..]
                .iter()
                .map(|&x| x * x)
                .sum::<f64>()
                .sqrt();
            let err = sub_frob(&rec, &m);
            assert!((err - discarded).abs() <= 1e-8, "err {err} vs discarded {discarded}");
        }
    }

    #[test]
    fn factors_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let v = rng.random_range(2..=32);
            let d = rng.random_range(2..=16);
            let m = random_matrix(&mut rng, v, d);
            let svd = truncated_svd(&m, v.min(d)).unwrap();
            assert!(orthonormality_defect(&svd.u, false) <= 1e-8);
            assert!(orthonormality_defect(&svd.vt, true) <= 1e-8);
        }
    }

    #[test]
    fn singular_values_descend_and_stay_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_matrix(&mut rng, 12, 7);
        let svd = truncated_svd(&m, 7).unwrap();
        let s = svd.s.data();
        for i in 0..s.len() {
            assert!(s[i] >= 0.0);
            if i > 0 {
                assert!(s[i - 1] >= s[i]);
            }
        }
    }

    #[test]
    fn sign_convention_pins_u_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let m = random_matrix(&mut rng, 8, 5);
            let svd = truncated_svd(&m, 5).unwrap();
            for j in 0..5 {
                let col: Vec<f64> = (0..8).map(|i| svd.u.at(i, j)).collect();
                let mut best_idx = 0;
                for (i, &x) in col.iter().enumerate() {
                    if x.abs() > col[best_idx].abs() {
                        best_idx = i;
                    }
                }
                assert!(col[best_idx] >= 0.0, "column {j} violates the sign convention");
            }
        }
    }

    #[test]
    fn rank_out_of_range_is_parameter_error() {
        let m = Tensor::<f64>::zeros(&[4, 3]);
        assert!(matches!(truncated_svd(&m, 0), Err(Error::Parameter(_))));
        assert!(matches!(truncated_svd(&m, 4), Err(Error::Parameter(_))));
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let m = random_matrix(&mut rng, 16, 10);
        let a = truncated_svd(&m, 6).unwrap();
        let b = truncated_svd(&m, 6).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        assert_eq!(a.s.data(), b.s.data());
        assert_eq!(a.vt.data(), b.vt.data());
    }
}
