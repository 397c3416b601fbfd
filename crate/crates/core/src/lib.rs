//! Koopman-linearized data-driven predictive control of a synchronous generator.
//!
//! The core is generic over the scalar type where it is pure numerics ([`plant`], [`koopman`],
//! [`bounds`]); data handling, the QP solver and the controller run in `f64`.

pub mod bounds;
pub mod data;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type GeneratorParams64 = plant::GeneratorParams<f64>;
pub type OperatingRegion64 = plant::OperatingRegion<f64>;
pub type State64 = plant::State<f64>;
pub type EmbeddingMatrices64 = koopman::EmbeddingMatrices<f64>;
pub type ErrorCertificate64 = koopman::ErrorCertificate<f64>;
pub type Equilibrium64 = koopman::Equilibrium<f64>;
