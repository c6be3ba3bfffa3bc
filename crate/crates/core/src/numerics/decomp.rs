//! Closed-form linear maps: least squares, PCA and whitening.

use crate::error::{PktError, Result};

use super::ops::{matmul, matmul_tn};
use super::svd::svd;
use super::tensor::{Real, Tensor};

/// Condition number above which the Gram matrix is treated as degenerate.
pub const GRAM_CONDITION_LIMIT: f64 = 1e8;

#[derive(Clone, Copy, Debug)]
pub struct LstsqOptions {
    /// Add `λI` with `λ = 1e-6·trace/d` when the Gram matrix is ill conditioned.
    pub regularize: bool,
}

impl Default for LstsqOptions {
    fn default() -> Self {
        LstsqOptions { regularize: true }
    }
}

/// `W' = (Elᵀ El)⁻¹ Elᵀ Es`, the minimizer of `‖Es − El·W'‖_F`.
pub fn least_squares_map<T: Real>(el: &Tensor<T>, es: &Tensor<T>) -> Result<Tensor<T>> {
    least_squares_map_with(el, es, LstsqOptions::default())
}

pub fn least_squares_map_with<T: Real>(el: &Tensor<T>, es: &Tensor<T>, opts: LstsqOptions) -> Result<Tensor<T>> {
    if el.rank() != 2 || es.rank() != 2 || el.rows() != es.rows() {
        return Err(PktError::shape(
            "least_squares_map",
            format!("row counts differ: {:?} vs {:?}", el.shape(), es.shape()),
        ));
    }
    let el64: Tensor<f64> = el.cast();
    let es64: Tensor<f64> = es.cast();
    let mut gram = matmul_tn(&el64, &el64)?;
    let rhs = matmul_tn(&el64, &es64)?;
    let d = gram.rows();

    let spectrum = svd(&gram)?.sigma;
    let (hi, lo) = (spectrum[0], spectrum[d - 1]);
    let ill = lo <= 0.0 || hi / lo > GRAM_CONDITION_LIMIT;
    if ill {
        if !opts.regularize {
            return Err(PktError::Singular(format!(
                "Gram matrix condition {:.3e} exceeds {GRAM_CONDITION_LIMIT:e}",
                if lo > 0.0 { hi / lo } else { f64::INFINITY }
            )));
        }
        let trace: f64 = (0..d).map(|i| gram.get(i, i)).sum();
        let lambda = 1e-6 * trace / d as f64;
        for i in 0..d {
            let g = gram.get(i, i);
            gram.set(i, i, g + lambda);
        }
    }
    let chol = cholesky(&gram)?;
    let w = cholesky_solve(&chol, &rhs);
    w.cast::<T>().ensure_finite("least_squares_map")
}

/// Lower-triangular `L` with `L·Lᵀ = a`.
fn cholesky(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = a.rows();
    let mut l = Tensor::<f64>::zeros(&[n, n]);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k).powi(2);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(PktError::Singular(format!("Gram matrix not positive definite at pivot {j}")));
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, m) = (l.rows(), b.cols());
    let mut x = b.clone();
    for c in 0..m {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in (i + 1)..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

fn column_mean(x: &Tensor<f64>) -> Vec<f64> {
    let (b, d) = (x.rows(), x.cols());
    let mut mu = vec![0.0; d];
    for i in 0..b {
        for (m, v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= b as f64);
    mu
}

fn centered(x: &Tensor<f64>, mu: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - mu[j])
}

fn check_fit_shape(op: &'static str, rows: usize, dl: usize, ds: usize) -> Result<()> {
    if ds == 0 || ds > dl {
        return Err(PktError::Dimension(format!("{op}: target dimension {ds} not in 1..={dl}")));
    }
    if rows < 2 {
        return Err(PktError::Dimension(format!("{op}: need at least 2 samples, got {rows}")));
    }
    Ok(())
}

/// Columns are the leading `ds` principal directions of the centered data.
/// Each column's largest-magnitude entry is made positive.
pub fn pca_fit<T: Real>(x: &Tensor<T>, ds: usize) -> Result<Tensor<T>> {
    check_fit_shape("pca_fit", x.rows(), x.cols(), ds)?;
    let x64: Tensor<f64> = x.cast();
    let xc = centered(&x64, &column_mean(&x64));
    let s = svd(&xc)?;
    let dl = x.cols();
    let mut p = Tensor::<f64>::zeros(&[dl, ds]);
    for j in 0..ds {
        let col = s.v.col(j);
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let col: Vec<f64> = col.iter().map(|v| v * sign).collect();
        p.set_col(j, &col);
    }
    Ok(p.cast())
}

pub fn pca_apply<T: Real>(x: &Tensor<T>, p: &Tensor<T>) -> Result<Tensor<T>> {
    matmul(x, p)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WhiteningOptions {
    /// Added to each retained eigenvalue before inversion; `0` makes a
    /// zero-variance direction an error.
    pub eps: f64,
}

/// BERT-style whitening: `(x − mean)·transform` has identity covariance.
#[derive(Clone, Debug)]
pub struct Whitening<T = f32> {
    pub mean: Vec<T>,
    /// `dl × ds`, equal to `U·Λ^{-1/2}` restricted to the top `ds` directions.
    pub transform: Tensor<T>,
}

impl<T: Real> Whitening<T> {
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        whitening_apply(x, self)
    }
}

pub fn whitening_fit<T: Real>(x: &Tensor<T>, ds: usize) -> Result<Whitening<T>> {
    whitening_fit_with(x, ds, WhiteningOptions::default())
}

/// Covariance uses the population normalization `1/B`.
pub fn whitening_fit_with<T: Real>(x: &Tensor<T>, ds: usize, opts: WhiteningOptions) -> Result<Whitening<T>> {
    check_fit_shape("whitening_fit", x.rows(), x.cols(), ds)?;
    let x64: Tensor<f64> = x.cast();
    let mu = column_mean(&x64);
    let b = x.rows() as f64;
    let xc = centered(&x64, &mu).scale(1.0 / b.sqrt());
    let s = svd(&xc)?;
    let top = s.sigma[0].powi(2);
    let dl = x.cols();
    let mut w = Tensor::<f64>::zeros(&[dl, ds]);
    for j in 0..ds {
        let lambda = s.sigma[j].powi(2) + opts.eps;
        if lambda <= 1e-12 * top.max(1e-300) || lambda <= 0.0 {
            return Err(PktError::Singular(format!("whitening: direction {j} has zero variance")));
        }
        let scale = 1.0 / lambda.sqrt();
        let col: Vec<f64> = s.v.col(j).iter().map(|v| v * scale).collect();
        w.set_col(j, &col);
    }
    Ok(Whitening { mean: mu.into_iter().map(T::of).collect(), transform: w.cast() })
}

pub fn whitening_apply<T: Real>(x: &Tensor<T>, wh: &Whitening<T>) -> Result<Tensor<T>> {
    if x.cols() != wh.mean.len() {
        return Err(PktError::Dimension(format!(
            "whitening_apply: input width {} vs fitted {}",
            x.cols(),
            wh.mean.len()
        )));
    }
    let xc = Tensor::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - wh.mean[j]);
    matmul(&xc, &wh.transform)
}

/// Population covariance of the rows of `x` (test and diagnostics helper).
pub fn covariance<T: Real>(x: &Tensor<T>) -> Tensor<f64> {
    let x64: Tensor<f64> = x.cast();
    let xc = centered(&x64, &column_mean(&x64));
    let mut c = matmul_tn(&xc, &xc).expect("square");
    let b = x.rows() as f64;
    c.data_mut().iter_mut().for_each(|v| *v /= b);
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_fit_in_column_space() {
        let el = Tensor::<f64>::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let es = Tensor::<f64>::from_rows(&[[1.0], [0.0], [1.0]]);
        let w = least_squares_map(&el, &es).unwrap();
        assert!(w.max_abs_diff(&Tensor::from_rows(&[[1.0], [0.0]])) < 1e-12);
        let w = least_squares_map(&el, &el).unwrap();
        assert!(w.max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }

    #[test]
    fn singular_gram_without_regularization_errors() {
        let el = Tensor::<f64>::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        let es = Tensor::<f64>::from_rows(&[[1.0], [2.0], [3.0]]);
        let err = least_squares_map_with(&el, &es, LstsqOptions { regularize: false });
        assert!(matches!(err, Err(PktError::Singular(_))));
        let w = least_squares_map(&el, &es).unwrap();
        assert!(w.is_finite());
    }

    #[test]
    fn pca_axis_aligned() {
        let x = Tensor::<f64>::from_rows(&[[-2.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]);
        let p = pca_fit(&x, 1).unwrap();
        assert!((p.get(0, 0).abs() - 1.0).abs() < 1e-12);
        let proj = pca_apply(&x, &p).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        assert!((var(proj.data()) - var(&x.col(0))).abs() < 1e-10);
    }

    #[test]
    fn pca_full_basis_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[20, 5], 1.0, &mut rng);
        let p = pca_fit(&x, 5).unwrap();
        let mu = column_mean(&x);
        let xc = centered(&x, &mu);
        let back = matmul(&matmul(&xc, &p).unwrap(), &p.transpose()).unwrap();
        assert!(back.max_abs_diff(&xc) < 1e-4);
        assert!(matches!(pca_fit(&x, 6), Err(PktError::Dimension(_))));
    }

    #[test]
    fn pca_isotropic_retains_proportional_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(&[4000, 10], 1.0, &mut rng);
        let p = pca_fit(&x, 3).unwrap();
        let kept: f64 = (0..3)
            .map(|j| {
                let col = pca_apply(&x, &p).unwrap().col(j);
                let m = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            })
            .sum();
        let total: f64 = (0..10)
            .map(|j| {
                let col = x.col(j);
                let m = col.iter().sum::<f64>() / col.len() as f64;
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            })
            .sum();
        let ratio = kept / total;
        assert!((ratio - 0.3).abs() <= 0.03, "ratio {ratio}");
    }

    fn diag_cov_data() -> Tensor<f64> {
        // Population covariance exactly diag(4, 1).
        Tensor::from_rows(&[[2.0, 1.0], [-2.0, 1.0], [2.0, -1.0], [-2.0, -1.0]])
    }

    #[test]
    fn whitening_diagonal_cases() {
        let x = diag_cov_data();
        let wh = whitening_fit(&x, 2).unwrap();
        let c = covariance(&wh.apply(&x).unwrap());
        assert!(c.max_abs_diff(&Tensor::eye(2)) < 1e-4);

        let wh1 = whitening_fit(&x, 1).unwrap();
        let c1 = covariance(&wh1.apply(&x).unwrap());
        assert!((c1.get(0, 0) - 1.0).abs() < 1e-4);
        assert!((wh1.transform.get(0, 0).abs() - 0.5).abs() < 1e-12);
        assert!(wh1.transform.get(1, 0).abs() < 1e-12);
    }

    #[test]
    fn whitening_zero_variance_needs_eps() {
        let x = Tensor::<f64>::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]]);
        assert!(matches!(whitening_fit(&x, 2), Err(PktError::Singular(_))));
        assert!(whitening_fit_with(&x, 2, WhiteningOptions { eps: 1e-3 }).is_ok());
    }
}
