use thiserror::Error;

use crate::moments::Regime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value {value} at quadrature node {node:?}")]
    NonFiniteSample { node: Vec<f64>, value: f64 },

    #[error("non-finite function value {value} at particle position {position:?}")]
    NonFiniteFunctional { position: Vec<f64>, value: f64 },

    #[error("potential is unbounded on the quadrature support: {value} at {node:?}")]
    UnboundedPotential { node: Vec<f64>, value: f64 },

    #[error("eigenvalue clustering did not converge: {0}")]
    Clustering(String),

    #[error("truncated basis has only {available} levels, {requested} requested")]
    InsufficientBasis { available: usize, requested: usize },

    #[error("model is not supercritical: lambda_1 = {lambda1}")]
    NotSupercritical { lambda1: f64 },

    #[error("offspring law at {position:?} is not a probability vector (sum = {sum})")]
    InvalidOffspring { position: Vec<f64>, sum: f64 },

    #[error("operation requires the {expected} regime but the function is in the {actual} regime")]
    RegimeMismatch { expected: &'static str, actual: Regime },

    #[error("{0}")]
    Precondition(String),

    #[error("adaptive quadrature did not converge after {panels} panels (last estimates {previous} and {last})")]
    QuadratureNonConvergence { panels: usize, previous: f64, last: f64 },

    #[error("eigenfunction ({level}, {index}) is outside the basis")]
    OutOfBasis { level: usize, index: usize },

    #[error("branching rate {beta} at {position:?} exceeds the thinning bound {bound}")]
    ThinningBoundViolated { position: Vec<f64>, beta: f64, bound: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
