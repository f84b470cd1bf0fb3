//! Dense linear-algebra kernels and the least-squares solver.

mod lstsq;
mod matrix;
mod ops;

pub use lstsq::{lstsq, lstsq_detailed, LstsqSolution, RANK_TOLERANCE, RIDGE_FALLBACK_SCALE};
pub use matrix::Matrix;
pub(crate) use ops::softmax_in_place;
pub use ops::{
    dot, frobenius_dot, frobenius_sq, gelu, gelu_grad, layernorm, layernorm_with_stats,
    log_softmax, matmul, matmul_transa, matmul_transb, matvec, matvec_trans, softmax, softmax_rows,
    LayerNormStats,
};
