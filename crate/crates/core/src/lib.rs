//! Recurrent inference machines: learned iterative solvers for linear inverse
//! problems `y = A x + n`.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autodiff`]),
//! forward models with exact adjoints ([`operators`]), the Gaussian
//! likelihood gradient and link function ([`likelihood`]), the recurrent
//! model with its ablations ([`models`]), training by backpropagation through
//! time ([`training`]) and evaluation metrics ([`metrics`]).

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod likelihood;
pub mod metrics;
pub mod models;
pub mod operators;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
