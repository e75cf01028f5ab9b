//! Core algorithms for an adaptive reduced-order twin of an incremental
//! sheet-forming process.
//!
//! The crate covers the full loop: snapshot datasets ([`dataset`]), POD and
//! Chebyshev dimension reduction ([`reduction`]), sinusoidal toolpath design
//! of experiments ([`toolpath`]), a synthetic elastoplastic plant ([`plant`]),
//! a lifted linear surrogate trained with a multi-step loss ([`koopman`]), a
//! sparse ADMM quadratic-program solver ([`qp`]), a receding-horizon
//! controller in lifted coordinates ([`mpc`]), and recursive least-squares
//! adaptation of the input map ([`adapt`]).

pub mod adapt;
pub mod dataset;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod mpc;
pub mod plant;
pub mod qp;
pub mod reduction;
pub mod toolpath;

pub use error::{Error, Result};
