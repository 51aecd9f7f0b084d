//! Topology optimization of two-fluid heat exchangers with a single design
//! field, a Helmholtz filter, Brinkman-penalized laminar flow, a coupled
//! convection–diffusion energy equation and an exact discrete adjoint.

pub mod config;
pub mod energy;
pub mod error;
pub mod export;
pub mod field_ops;
pub mod flow;
pub mod linalg;
pub mod materials;
pub mod mesh;
pub mod objective;
pub mod optimizer;
pub mod reference;
pub mod verification;

pub use error::{Error, Result};
