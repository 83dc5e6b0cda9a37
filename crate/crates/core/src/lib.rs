//! Numerical laboratory for supercritical branching Ornstein–Uhlenbeck
//! particle systems: spectrum of the mean semigroup, limiting variances of
//! the central limit theorems, exact-in-law simulation and statistical
//! verification of the predicted limit laws.

pub mod error;
pub mod hermite;
pub mod model;
pub mod moments;
pub mod particle;
pub mod quadrature;
pub mod spectral;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ModelSpec, OffspringLaw, RateFn, SpectrumOptions};
pub use moments::{MomentKernel, MomentReport, Regime};
pub use particle::{Configuration, SimConfig, Trajectory};
pub use spectral::{FunctionExpansion, OUParams, SpectralBasis, SpectrumSource};
pub use verify::{EnsembleReport, Scenario, StatisticKind, Thresholds, Verdict};
