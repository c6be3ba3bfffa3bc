//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Rotations act on the columns of whichever orientation of the input has
//! fewer columns, so the implicit Gram matrix is the smaller one. All work
//! is done in `f64` regardless of the storage type.

use crate::error::{PktError, Result};

use super::tensor::{Real, Tensor};

const MAX_SWEEPS: usize = 100;

/// `A = U · diag(sigma) · Vᵀ` with `k = min(n, m)` retained directions.
#[derive(Clone, Debug)]
pub struct SvdResult<T = f32> {
    /// `n × k`, orthonormal columns.
    pub u: Tensor<T>,
    /// Nonincreasing, nonnegative, length `k`.
    pub sigma: Vec<T>,
    /// `m × k`, orthonormal columns.
    pub v: Tensor<T>,
}

impl<T: Real> SvdResult<T> {
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Tensor<T> {
        let (n, m, k) = (self.u.rows(), self.v.rows(), self.k());
        Tensor::from_fn(n, m, |i, j| (0..k).map(|p| self.u.get(i, p) * self.sigma[p] * self.v.get(j, p)).sum())
    }

    /// `sqrt(Σ_{i ≥ r} σ_i²)`: the Frobenius error of the best rank-`r` fit.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.sigma[r.min(self.k())..].iter().map(|s| s.as_f64().powi(2)).sum::<f64>().sqrt()
    }
}

pub fn svd<T: Real>(a: &Tensor<T>) -> Result<SvdResult<T>> {
    if a.rank() != 2 {
        return Err(PktError::shape("svd", format!("expected matrix, got {:?}", a.shape())));
    }
    if !a.is_finite() {
        return Err(PktError::NonFinite("svd input"));
    }
    let (n, m) = (a.rows(), a.cols());
    if n >= m {
        let cols: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| a.get(i, j).as_f64()).collect()).collect();
        let (u, sigma, v) = jacobi_columns(cols, n);
        Ok(SvdResult { u: to_tensor(&u, n), sigma: sigma.into_iter().map(T::of).collect(), v: to_tensor(&v, m) })
    } else {
        // Aᵀ = U' Σ V'ᵀ  ⇒  A = V' Σ U'ᵀ
        let cols: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).iter().map(|x| x.as_f64()).collect()).collect();
        let (u_t, sigma, v_t) = jacobi_columns(cols, m);
        Ok(SvdResult { u: to_tensor(&v_t, n), sigma: sigma.into_iter().map(T::of).collect(), v: to_tensor(&u_t, m) })
    }
}

/// Column-list `cols[j][i]` to an `rows × cols.len()` tensor.
fn to_tensor<T: Real>(cols: &[Vec<f64>], rows: usize) -> Tensor<T> {
    Tensor::from_fn(rows, cols.len(), |i, j| T::of(cols[j][i]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthogonalizes the given columns (each of length `n`).
/// Returns (left vectors, singular values, right vectors) as column lists, sorted.
fn jacobi_columns(mut cols: Vec<Vec<f64>>, n: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let m = cols.len();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();
    let eps = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable: equal singular values keep the lower index first.
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal));

    let max_sigma = norms.iter().cloned().fold(0.0, f64::max);
    let tol = max_sigma * (n.max(m) as f64) * 1e-14;
    let mut sigma = Vec::with_capacity(m);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut right = Vec::with_capacity(m);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > tol && s > 0.0 {
            sigma.push(s);
            u.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            sigma.push(0.0);
            u.push(vec![0.0; n]);
            deficient.push(slot);
        }
        right.push(v[j].clone());
    }
    complete_basis(&mut u, &deficient, n);
    (u, sigma, right)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others.
fn complete_basis(u: &mut [Vec<f64>], deficient: &[usize], n: usize) {
    let mut basis_index = 0;
    for &slot in deficient {
        while basis_index < n {
            let mut cand = vec![0.0; n];
            cand[basis_index] = 1.0;
            basis_index += 1;
            for _ in 0..2 {
                for (j, col) in u.iter().enumerate() {
                    if j == slot || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&cand, col);
                    for (c, x) in cand.iter_mut().zip(col) {
                        *c -= proj * x;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 0.5 {
                u[slot] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Rank-`r` factors `(B, A)` with `B = U[:, :r]·diag(σ[:r])` and `A = V[:, :r]ᵀ`.
pub fn truncate_svd<T: Real>(s: &SvdResult<T>, r: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = s.k();
    if r == 0 || r > k {
        return Err(PktError::Rank { rank: r, max: k });
    }
    let n = s.u.rows();
    let m = s.v.rows();
    let b = Tensor::from_fn(n, r, |i, j| s.u.get(i, j) * s.sigma[j]);
    let a = Tensor::from_fn(r, m, |i, j| s.v.get(j, i));
    Ok((b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops::matmul;
    use crate::numerics::tensor::relative_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn orthonormal_cols(t: &Tensor<f64>) -> f64 {
        let g = crate::numerics::ops::matmul_tn(t, t).unwrap();
        g.max_abs_diff(&Tensor::eye(t.cols()))
    }

    #[test]
    fn diagonal_case() {
        let a = Tensor::<f64>::from_rows(&[[3.0, 0.0], [0.0, 1.0]]);
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 3.0).abs() < 1e-12 && (s.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [1.0, 2.0, 2.0];
        let v = [3.0, 4.0];
        let a = Tensor::<f64>::from_fn(3, 2, |i, j| u[i] * v[j]);
        let s = svd(&a).unwrap();
        assert!((s.sigma[0] - 15.0).abs() < 1e-10);
        assert!(s.sigma[1].abs() < 1e-10);
        assert!(orthonormal_cols(&s.u) < 1e-10);
        assert!(relative_error(&s.reconstruct(), &a) < 1e-10);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        let a = Tensor::<f64>::zeros(&[4, 3]);
        let s = svd(&a).unwrap();
        assert!(s.sigma.iter().all(|&x| x == 0.0));
        assert!(orthonormal_cols(&s.u) < 1e-12);
        assert!(orthonormal_cols(&s.v) < 1e-12);
    }

    #[test]
    fn wide_and_tall_inputs_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in [[6, 4], [4, 6], [5, 5], [1, 7], [7, 1]] {
            let a = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
            let s = svd(&a).unwrap();
            assert_eq!(s.k(), shape[0].min(shape[1]));
            assert!(relative_error(&s.reconstruct(), &a) < 1e-10, "{shape:?}");
            assert!(orthonormal_cols(&s.u) < 1e-10);
            assert!(orthonormal_cols(&s.v) < 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn truncation_cases() {
        let a = Tensor::<f64>::from_rows(&[[2.0, 0.0], [0.0, 1.0]]);
        let s = svd(&a).unwrap();
        let (b, aa) = truncate_svd(&s, 1).unwrap();
        let ba = matmul(&b, &aa).unwrap();
        assert!(ba.max_abs_diff(&Tensor::from_rows(&[[2.0, 0.0], [0.0, 0.0]])) < 1e-12);
        let (b, aa) = truncate_svd(&s, 2).unwrap();
        assert!(matmul(&b, &aa).unwrap().max_abs_diff(&a) < 1e-12);
        assert!(matches!(truncate_svd(&s, 3), Err(PktError::Rank { .. })));
        assert!(matches!(truncate_svd(&s, 0), Err(PktError::Rank { .. })));
    }

    #[test]
    fn f32_storage_meets_tolerances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::<f32>::randn(&[12, 9], 1.0, &mut rng);
        let s = svd(&a).unwrap();
        assert!(relative_error(&s.reconstruct(), &a) < 1e-5);
        let g = crate::numerics::ops::matmul_tn(&s.u, &s.u).unwrap();
        assert!(g.max_abs_diff(&Tensor::eye(9)) < 1e-5);
    }
}
