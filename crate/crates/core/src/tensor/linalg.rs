//! One-sided Jacobi SVD and LU solves.

use super::{dot, Tensor};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const OFF_TOL: f64 = 1e-12;
const MAX_CONDITION: f64 = 1e12;

/// Thin SVD `W = U·diag(s)·Vᵀ` with `p = min(rows, cols)` components.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

/// Top-`r` factors plus the residual that restores the full weight.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
    pub w_res: Tensor,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U·diag(S)·Vᵀ + W_res`
    pub fn reconstruct(&self) -> Tensor {
        let us = scale_cols(&self.u, &self.s);
        let mut w = us.matmul_t(&self.v).expect("factor shapes");
        for (a, b) in w.data_mut().iter_mut().zip(self.w_res.data()) {
            *a += b;
        }
        w
    }
}

fn scale_cols(m: &Tensor, s: &[f64]) -> Tensor {
    let c = m.cols();
    let mut out = m.clone();
    for row in out.data_mut().chunks_mut(c) {
        for (v, k) in row.iter_mut().zip(s) {
            *v *= k;
        }
    }
    out
}

pub fn svd(w: &Tensor) -> Result<Svd> {
    svd_named(w, "matrix")
}

/// Full thin SVD; `name` appears in the error on non-convergence.
pub fn svd_named(w: &Tensor, name: &str) -> Result<Svd> {
    if w.rank() != 2 {
        return Err(Error::dim("svd", w.shape(), &[0, 0]));
    }
    if !w.is_finite() {
        return Err(Error::Numerical(format!("svd of {name}: non-finite entries")));
    }
    let (m, n) = (w.rows(), w.cols());
    if m < n {
        let t = svd_tall(&w.transpose(), name)?;
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    svd_tall(w, name)
}

fn svd_tall(w: &Tensor, name: &str) -> Result<Svd> {
    let (m, n) = (w.rows(), w.cols());
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0 || gamma.abs() <= OFF_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "svd of {name} ({m}x{n}) did not converge in {MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<(f64, usize)> = a.iter().enumerate().map(|(j, c)| (dot(c, c).sqrt(), j)).collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let smax = order.first().map_or(0.0, |o| o.0);
    let zero_tol = smax * 1e-14 * (m.max(n) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &(sv, j)) in order.iter().enumerate() {
        if sv > zero_tol && sv > 0.0 {
            ucols.push(a[j].iter().map(|x| x / sv).collect());
            s.push(sv);
        } else {
            ucols.push(vec![0.0; m]);
            s.push(0.0);
            missing.push(k);
        }
    }
    complete_orthonormal(&mut ucols, &missing, m);
    let mut u = Tensor::zeros(&[m, n]);
    let mut vt = Tensor::zeros(&[n, n]);
    for (k, &(_, j)) in order.iter().enumerate() {
        for i in 0..m {
            u.set(i, k, ucols[k][i]);
        }
        for i in 0..n {
            vt.set(i, k, v[j][i]);
        }
    }
    Ok(Svd { u, s, v: vt })
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills `cols[k]` for `k` in `missing` with unit vectors orthogonal to all
/// other columns (modified Gram-Schmidt over the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut basis = 0;
    for &k in missing {
        while basis < m {
            let mut e = vec![0.0; m];
            e[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for (idx, c) in cols.iter().enumerate() {
                    if idx == k || (missing.contains(&idx) && c.iter().all(|x| *x == 0.0)) {
                        continue;
                    }
                    let p = dot(&e, c);
                    for (a, b) in e.iter_mut().zip(c) {
                        *a -= p * b;
                    }
                }
            }
            let nrm = dot(&e, &e).sqrt();
            if nrm > 1e-6 {
                cols[k] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Top-`r` SVD with residual. The factors are plain constants.
pub fn svd_topr(w: &Tensor, r: usize) -> Result<SvdFactors> {
    svd_topr_named(w, r, "matrix")
}

pub fn svd_topr_named(w: &Tensor, r: usize, name: &str) -> Result<SvdFactors> {
    if w.rank() != 2 || r > w.rows().min(w.cols()) {
        return Err(Error::dim("svd_topr", w.shape(), &[r]));
    }
    let full = svd_named(w, name)?;
    let idx: Vec<usize> = (0..r).collect();
    let u = full.u.select_columns(&idx);
    let v = full.v.select_columns(&idx);
    let s = full.s[..r].to_vec();
    let low = scale_cols(&u, &s).matmul_t(&v)?;
    let w_res = w.sub(&low)?;
    Ok(SvdFactors { u, s, v, w_res })
}

/// LU factorisation with partial pivoting of a square matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a`, rejecting singular or ill-conditioned input.
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = a.rows();
        if a.rank() != 2 || a.cols() != n {
            return Err(Error::dim("lu", a.shape(), &[n, n]));
        }
        if !a.is_finite() {
            return Err(Error::Numerical("solve: non-finite matrix".into()));
        }
        let mut lu = a.data().to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pv) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pv == 0.0 {
                return Err(Error::Numerical("solve: singular matrix".into()));
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let piv = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / piv;
                lu[i * n + k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= f * lu[k * n + j];
                    }
                }
            }
        }
        let f = Lu { n, lu, perm };
        let cond = f.condition_1(a);
        if !(cond < MAX_CONDITION) {
            return Err(Error::Numerical(format!(
                "solve: matrix is ill-conditioned (condition estimate {cond:.3e})"
            )));
        }
        Ok(f)
    }

    /// `‖A‖₁·‖A⁻¹‖₁`, with the inverse formed explicitly (n is small here).
    fn condition_1(&self, a: &Tensor) -> f64 {
        let n = self.n;
        let inv = self.solve(Tensor::eye(n).data(), n, false);
        let norm1 = |d: &[f64]| (0..n).map(|j| (0..n).map(|i| d[i * n + j].abs()).sum::<f64>()).fold(0.0, f64::max);
        norm1(a.data()) * norm1(&inv)
    }

    /// Solves `A·X = B` (or `Aᵀ·X = B`) for a row-major n×`ncols` `b`.
    pub fn solve(&self, b: &[f64], ncols: usize, transpose: bool) -> Vec<f64> {
        let n = self.n;
        let lu = &self.lu;
        let mut x = vec![0.0; n * ncols];
        if !transpose {
            for i in 0..n {
                x[i * ncols..(i + 1) * ncols].copy_from_slice(&b[self.perm[i] * ncols..(self.perm[i] + 1) * ncols]);
            }
            for i in 0..n {
                for k in 0..i {
                    let f = lu[i * n + k];
                    if f != 0.0 {
                        for c in 0..ncols {
                            x[i * ncols + c] -= f * x[k * ncols + c];
                        }
                    }
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    let f = lu[i * n + k];
                    if f != 0.0 {
                        for c in 0..ncols {
                            x[i * ncols + c] -= f * x[k * ncols + c];
                        }
                    }
                }
                let d = lu[i * n + i];
                for c in 0..ncols {
                    x[i * ncols + c] /= d;
                }
            }
            x
        } else {
            let mut w = b.to_vec();
            for i in 0..n {
                for k in 0..i {
                    let f = lu[k * n + i];
                    if f != 0.0 {
                        for c in 0..ncols {
                            w[i * ncols + c] -= f * w[k * ncols + c];
                        }
                    }
                }
                let d = lu[i * n + i];
                for c in 0..ncols {
                    w[i * ncols + c] /= d;
                }
            }
            for i in (0..n).rev() {
                for k in i + 1..n {
                    let f = lu[k * n + i];
                    if f != 0.0 {
                        for c in 0..ncols {
                            w[i * ncols + c] -= f * w[k * ncols + c];
                        }
                    }
                }
            }
            for i in 0..n {
                x[self.perm[i] * ncols..(self.perm[i] + 1) * ncols].copy_from_slice(&w[i * ncols..(i + 1) * ncols]);
            }
            x
        }
    }
}

/// `A⁻¹·B` without gradient tracking.
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.rank() != 2 || b.rows() != a.rows() {
        return Err(Error::dim("solve", a.shape(), b.shape()));
    }
    let lu = Lu::factor(a)?;
    Tensor::new(b.shape().to_vec(), lu.solve(b.data(), b.cols(), false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn orthonormality_error(q: &Tensor) -> f64 {
        q.t_matmul(q).unwrap().max_abs_diff(&Tensor::eye(q.cols()))
    }

    #[test]
    fn identity_top2() {
        let f = svd_topr(&Tensor::eye(4), 2).unwrap();
        assert_eq!(f.s, vec![1.0, 1.0]);
        assert!(f.reconstruct().max_abs_diff(&Tensor::eye(4)) < 1e-15);
        assert!((f.w_res.frobenius_norm() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_top2_leaves_smallest_in_residual() {
        let w = Tensor::diag(&[3.0, 2.0, 1.0]);
        let f = svd_topr(&w, 2).unwrap();
        assert!((f.s[0] - 3.0).abs() < 1e-14 && (f.s[1] - 2.0).abs() < 1e-14);
        assert!(f.w_res.max_abs_diff(&Tensor::diag(&[0.0, 0.0, 1.0])) < 1e-14);
    }

    #[test]
    fn random_square_full_rank_has_no_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 8, 8);
        let f = svd_topr(&w, 8).unwrap();
        assert!(f.w_res.frobenius_norm() < 1e-8);
    }

    #[test]
    fn rectangular_factors_are_orthonormal_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (r, c) in [(12, 5), (5, 12), (16, 16)] {
            let w = random(&mut rng, r, c);
            let k = r.min(c);
            let f = svd_topr(&w, k - 1).unwrap();
            assert!(orthonormality_error(&f.u) < 1e-8);
            assert!(orthonormality_error(&f.v) < 1e-8);
            assert!(f.s.windows(2).all(|p| p[0] >= p[1]));
            let rel = f.reconstruct().sub(&w).unwrap().frobenius_norm() / w.frobenius_norm();
            assert!(rel < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_u_is_completed() {
        let mut w = Tensor::zeros(&[5, 3]);
        w.set(0, 0, 2.0);
        w.set(1, 1, 1.0);
        let s = svd(&w).unwrap();
        assert_eq!(s.s[2], 0.0);
        assert!(orthonormality_error(&s.u) < 1e-12);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        assert!(svd_topr(&Tensor::eye(3), 4).is_err());
    }

    #[test]
    fn solve_examples() {
        let b = Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(solve(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::diag(&[2.0, 4.0]);
        let x = solve(&a, &Tensor::eye(2)).unwrap();
        assert_eq!(x.data(), &[0.5, 0.0, 0.0, 0.25]);
    }

    #[test]
    fn solve_transpose_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, 5, 5).add(&Tensor::eye(5).scale(3.0)).unwrap();
        let b = random(&mut rng, 5, 2);
        let lu = Lu::factor(&a).unwrap();
        let x = lu.solve(b.data(), 2, true);
        let x2 = solve(&a.transpose(), &b).unwrap();
        let d = x.iter().zip(x2.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn singular_and_ill_conditioned_are_numerical_errors() {
        let s = Tensor::matrix(2, 2, vec![1., 2., 2., 4.]).unwrap();
        assert!(matches!(solve(&s, &Tensor::eye(2)), Err(Error::Numerical(_))));
        let ill = Tensor::diag(&[1.0, 1e-13]);
        assert!(matches!(solve(&ill, &Tensor::eye(2)), Err(Error::Numerical(_))));
    }
}
