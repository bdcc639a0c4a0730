//! Autoencoders with geometric regularization of the decoder.
//!
//! The crate trains small fully connected autoencoders under reconstruction
//! loss plus one of several decoder regularizers (global isometry, local
//! isometry, constant or nonlinear conformal), and extracts geometric
//! diagnostics from the trained decoder: the pullback metric `R = JᵀJ`, the
//! conformal factor `c = Tr R / m`, the scalar curvature of a 2-D latent space
//! through a kNN graph Laplacian, and condition numbers of `J` and `R`.
//!
//! Everything is `f64` and deterministic given a seed.

pub mod analytic;
pub mod cli;
pub mod data;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod net;
pub mod plot;
pub mod regularizers;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use net::{Activation, DifferentiableMap, Mlp};
