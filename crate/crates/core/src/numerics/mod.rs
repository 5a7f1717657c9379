//! Dense linear algebra, probability transforms, losses and gradient checking.

mod gradcheck;
mod matrix;
mod prob;

pub use gradcheck::grad_check;
pub use matrix::{dot, l2_normalize_columns, norm, normalize, Matrix, EPS_NORM};
pub use prob::{
    argmax, cross_entropy, kl_divergence, log_softmax, log_sum_exp, softmax, KlClamp, EPS_KL,
};
