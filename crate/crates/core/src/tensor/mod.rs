//! Dense matrix primitives, softmax, operator norms and the φ machinery.

mod matrix;
mod norm;
mod phi;
mod softmax;

pub use matrix::{axpy, dot, norm2, Matrix};
pub use norm::{
    op_norm, op_norm_inf, power_iteration, spectral_norm, spectral_norm_oracle, symmetric_eigenvalues,
    NormBackend, NormKind, EXACT_SPECTRAL_MAX_DIM, FALLBACK_POWER_ITERS,
};
pub use phi::{phi, phi_inv};
pub(crate) use softmax::softmax_into;
pub use softmax::{softmax_rows, StochasticMatrix};
