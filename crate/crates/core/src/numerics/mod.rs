//! Deterministic dense linear algebra, decompositions and reverse-mode
//! differentiation shared by every other module.

pub mod autodiff;
pub mod decomp;
pub mod ops;
pub mod optim;
pub mod svd;
pub mod tensor;

pub use autodiff::{Gradients, Segments, Tape, Var};
pub use decomp::{
    covariance, least_squares_map, least_squares_map_with, pca_apply, pca_fit, whitening_apply, whitening_fit,
    whitening_fit_with, LstsqOptions, Whitening, WhiteningOptions,
};
pub use ops::{log_softmax_at, logsumexp, matmul, matmul_nt, matmul_tn, matvec, softmax, Trans};
pub use optim::AdamW;
pub use svd::{svd, truncate_svd, SvdResult};
pub use tensor::{relative_error, Real, Tensor};

/// Descending order by score; ties keep the lower index first.
pub fn argsort_desc<T: PartialOrd>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}
