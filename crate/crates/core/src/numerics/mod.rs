//! Dense linear algebra and seeded sampling shared by the rest of the crate.

mod eigen;
mod matrix;
mod rng;

pub use eigen::{
    apply_sign_convention, orthonormality_error, sym_eig_desc, thin_svd, EigDecomposition, ThinSvd,
};
pub use matrix::{axpy, dot, norm2, DenseMatrix};
pub use rng::{gaussian_vector, RngStream};
