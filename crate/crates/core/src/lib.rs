//! Learned regularization for undersampled single-coil MRI: a feature
//! network defines `r(x) = |q(x)|_{2,1}`, a provably convergent descent
//! scheme minimizes the data term plus `r`, and the unrolled scheme is
//! trained end to end.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod mri;
pub mod network;
pub mod regularizer;
pub mod selfcheck;
pub mod solver;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
