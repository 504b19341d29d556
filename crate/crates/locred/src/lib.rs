//! Localized reduced basis approximation of the 2D stationary heat equation
//! with online enrichment.
//!
//! The crate builds a P1 finite element discretization of
//! `-div(kappa grad u) = f` on the unit square with homogeneous Dirichlet
//! conditions, covers the domain with overlapping box subdomains, and grows
//! a reduced space one local enrichment per iteration.  Two enrichment
//! strategies are provided:
//!
//! * residual based: enrich with the local Riesz representative of the
//!   residual in the subdomain where its dual norm is largest,
//! * globally coupled: solve the problem on `V_n + O_i` for every subdomain
//!   and enrich where the solution shift is largest (the optimal choice).
//!
//! [`diagnostics`] records per-iteration error decay, convergence rate and
//! the sharpness of the a priori inequalities, and writes them as plain
//! `.dat` files.  [`runner`] plus the `locred` binary wire everything into a
//! reproducible experiment harness.

pub mod decomposition;
pub mod diagnostics;
pub mod enrichment;
pub mod fem;
pub mod fields;
pub mod config;
pub mod runner;

use thiserror::Error;

/// Crate wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh parameter: {0}")]
    Mesh(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid decomposition: {0}")]
    Decomposition(String),
    #[error("partition of unity violation: {0}")]
    PartitionOfUnity(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
