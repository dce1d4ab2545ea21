//! Adaptive isogeometric boundary element methods for the 2D Laplace
//! single-layer equation `V phi = f` on NURBS curves.
//!
//! The crate is organised bottom-up:
//!
//! * [`splines`]: B-spline / NURBS bases and knot insertion
//! * [`geometry`]: boundary curves, meshes, node patches
//! * [`quadrature`]: Gauss and log-weighted rules
//! * [`operators`]: discrete spaces and dense Galerkin / collocation assembly
//! * [`solve`]: dense solves, energy norms, error identities
//! * [`estimators`]: Faermann and weighted-residual indicators
//! * [`adaptivity`]: marking and refinement
//! * [`experiments`]: benchmark problems and the adaptive driver
//!
//! With the default `parallel` feature, assembly and indicator loops run on
//! the rayon thread pool; without it everything runs sequentially with
//! identical results.

// index loops mirror the formulas; negated comparisons deliberately catch NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptivity;
pub mod estimators;
pub mod experiments;
pub mod geometry;
pub mod operators;
pub mod quadrature;
pub mod solve;
pub mod splines;

mod par;

pub use par::par_map;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter {t} outside [{a}, {b}]")]
    OutsideDomain { t: f64, a: f64, b: f64 },
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("multiplicity {multiplicity} exceeds maximum {max}")]
    MultiplicityOverflow { multiplicity: usize, max: usize },
    #[error("weight {0} is not positive")]
    NonPositiveWeight(f64),
    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("matrix is singular or too ill-conditioned (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("quadrature did not reach tolerance (estimated error {0:.3e})")]
    Quadrature(f64),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
