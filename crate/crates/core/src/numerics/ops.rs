//! Dense products and the softmax family.

use crate::error::{PktError, Result};

use super::tensor::{Real, Tensor};

/// Whether an operand of [`gemm`] is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

fn dims<T: Real>(t: &Tensor<T>, tr: Trans) -> (usize, usize, isize, isize) {
    let (r, c) = (t.rows(), t.cols());
    match tr {
        Trans::No => (r, c, c as isize, 1),
        Trans::Yes => (c, r, 1, c as isize),
    }
}

/// `op(a) · op(b)` for rank-2 tensors.
pub fn gemm<T: Real>(a: &Tensor<T>, ta: Trans, b: &Tensor<T>, tb: Trans) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(PktError::shape(
            "matmul",
            format!("operands must be matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, rsa, csa) = dims(a, ta);
    let (k2, n, rsb, csb) = dims(b, tb);
    if k != k2 {
        return Err(PktError::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} · {:?}{}",
                a.shape(),
                if ta == Trans::Yes { "ᵀ" } else { "" },
                b.shape(),
                if tb == Trans::Yes { "ᵀ" } else { "" },
            ),
        ));
    }
    let mut out = Tensor::zeros(&[m, n]);
    // SAFETY: shapes checked above; `out` is freshly allocated with m*n entries.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, Trans::No, b, Trans::No)
}

/// `a · bᵀ`
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, Trans::No, b, Trans::Yes)
}

/// `aᵀ · b`
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, Trans::Yes, b, Trans::No)
}

/// Matrix-vector product `W · x` for `W` of shape `[out, in]`.
pub fn matvec<T: Real>(w: &Tensor<T>, x: &[T]) -> Vec<T> {
    (0..w.rows()).map(|i| w.row(i).iter().zip(x).map(|(&a, &b)| a * b).sum()).collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(PktError::shape("softmax", "empty vector"));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(v)` computed with max subtraction.
pub fn logsumexp<T: Real>(v: &[T]) -> T {
    let max = v.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// `log softmax(v)[index]`, never underflowing to `-inf` for finite input.
pub fn log_softmax_at<T: Real>(v: &[T], index: usize) -> T {
    v[index] - logsumexp(v)
}
