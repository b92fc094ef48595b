//! Numerical weak KAM theory for convex Hamiltonians on `R^d` and `T^d`.

pub mod action;
pub mod error;
pub mod export;
pub mod flow;
pub mod generating;
pub mod hamiltonian;
pub mod laxoleinik;
pub mod linalg;
pub mod weakkam;

pub use error::{Error, Result};
