//! Branching mechanism: rate `β(x)`, offspring law `p_n(x)`, and the derived
//! potentials `α(x)` and `A(x)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{closed_form_spectrum, galerkin_spectrum, OUParams, SpectralBasis};

/// Largest offspring count an offspring table may carry.
pub const MAX_OFFSPRING: usize = 10;

const PMF_TOLERANCE: f64 = 1e-12;

/// Spatial profile used by the x-dependent rates and mixtures:
/// `exp(−‖x‖²/width²)`.
fn bump(x: &[f64], width: f64) -> f64 {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    (-r2 / (width * width)).exp()
}

/// A bounded nonnegative rate function on `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateFn {
    Constant(f64),
    /// `base + amplitude·exp(−‖x‖²/width²)`
    Bump { base: f64, amplitude: f64, width: f64 },
}

impl RateFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            RateFn::Constant(c) => c,
            RateFn::Bump { base, amplitude, width } => base + amplitude * bump(x, width),
        }
    }

    pub fn as_constant(&self) -> Option<f64> {
        match *self {
            RateFn::Constant(c) => Some(c),
            RateFn::Bump { base, amplitude, .. } if amplitude == 0.0 => Some(base),
            RateFn::Bump { .. } => None,
        }
    }

    /// Exact supremum over `R^d`.
    pub fn sup(&self) -> f64 {
        match *self {
            RateFn::Constant(c) => c,
            RateFn::Bump { base, amplitude, .. } => base + amplitude.max(0.0),
        }
    }

    fn inf(&self) -> f64 {
        match *self {
            RateFn::Constant(c) => c,
            RateFn::Bump { base, amplitude, .. } => base + amplitude.min(0.0),
        }
    }

    fn validate(&self) -> Result<()> {
        if let RateFn::Bump { width, .. } = *self {
            if !(width > 0.0 && width.is_finite()) {
                return Err(invalid("beta.width", format!("must be positive, got {width}")));
            }
        }
        let (lo, hi) = (self.inf(), self.sup());
        if !(lo >= 0.0) || !hi.is_finite() {
            return Err(invalid("beta", format!("rate must be bounded and nonnegative, range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// Offspring distribution over `{0, 1, …, n_max}`, possibly depending on the
/// branching position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffspringLaw {
    Fixed(Vec<f64>),
    /// `w(x)·inner + (1 − w(x))·outer` with `w(x) = exp(−‖x‖²/width²)`.
    Mixture { inner: Vec<f64>, outer: Vec<f64>, width: f64 },
}

impl OffspringLaw {
    /// Probability vector at `x`, indexed by offspring count.
    pub fn pmf(&self, x: &[f64]) -> Vec<f64> {
        match self {
            OffspringLaw::Fixed(p) => p.clone(),
            OffspringLaw::Mixture { inner, outer, width } => {
                let w = bump(x, *width);
                let n = inner.len().max(outer.len());
                (0..n)
                    .map(|i| w * inner.get(i).copied().unwrap_or(0.0) + (1.0 - w) * outer.get(i).copied().unwrap_or(0.0))
                    .collect()
            }
        }
    }

    pub fn as_fixed(&self) -> Option<&[f64]> {
        match self {
            OffspringLaw::Fixed(p) => Some(p),
            OffspringLaw::Mixture { inner, outer, .. } if inner == outer => Some(inner),
            OffspringLaw::Mixture { .. } => None,
        }
    }

    pub fn max_offspring(&self) -> usize {
        match self {
            OffspringLaw::Fixed(p) => p.len().saturating_sub(1),
            OffspringLaw::Mixture { inner, outer, .. } => inner.len().max(outer.len()).saturating_sub(1),
        }
    }

    /// `Σ n p_n(x)`.
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.pmf(x).iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    /// `Σ n(n−1) p_n(x)`.
    pub fn second_factorial_moment(&self, x: &[f64]) -> f64 {
        self.pmf(x)
            .iter()
            .enumerate()
            .map(|(n, p)| (n * n.saturating_sub(1)) as f64 * p)
            .sum()
    }

    fn validate_table(p: &[f64], name: &'static str) -> Result<()> {
        if p.is_empty() || p.len() > MAX_OFFSPRING + 1 {
            return Err(invalid(name, format!("table must list 1..={} probabilities", MAX_OFFSPRING + 1)));
        }
        if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(invalid(name, "probabilities must be finite and nonnegative"));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PMF_TOLERANCE {
            return Err(Error::InvalidOffspring { position: Vec::new(), sum });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        match self {
            OffspringLaw::Fixed(p) => Self::validate_table(p, "offspring"),
            OffspringLaw::Mixture { inner, outer, width } => {
                Self::validate_table(inner, "offspring.inner")?;
                Self::validate_table(outer, "offspring.outer")?;
                if !(*width > 0.0 && width.is_finite()) {
                    return Err(invalid("offspring.width", format!("must be positive, got {width}")));
                }
                Ok(())
            }
        }
    }
}

/// Truncation used for the spectrum of `L + α`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumOptions {
    /// Number of distinct levels kept.
    pub k_max: usize,
    /// Galerkin truncation order (Hermite degrees `< n`).
    pub galerkin_n: usize,
}

impl SpectrumOptions {
    pub fn for_dimension(d: usize) -> Self {
        match d {
            1 => Self { k_max: 16, galerkin_n: 40 },
            2 => Self { k_max: 8, galerkin_n: 14 },
            _ => Self { k_max: 5, galerkin_n: 8 },
        }
    }
}

/// The branching OU model with its spectral data.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    ou: OUParams,
    beta: RateFn,
    offspring: OffspringLaw,
    basis: SpectralBasis,
}

impl ModelSpec {
    pub fn new(ou: OUParams, beta: RateFn, offspring: OffspringLaw) -> Result<Self> {
        Self::with_options(ou, beta, offspring, SpectrumOptions::for_dimension(ou.d()))
    }

    pub fn with_options(ou: OUParams, beta: RateFn, offspring: OffspringLaw, opts: SpectrumOptions) -> Result<Self> {
        let model = Self::for_simulation(ou, beta, offspring, opts)?;
        if !model.is_supercritical() {
            return Err(Error::NotSupercritical { lambda1: model.lambda1() });
        }
        Ok(model)
    }

    /// As [`ModelSpec::with_options`] without the `λ_1 < 0` requirement:
    /// critical and subcritical systems can be simulated, but the limit
    /// theorems and their variance formulas do not apply to them.
    pub fn for_simulation(ou: OUParams, beta: RateFn, offspring: OffspringLaw, opts: SpectrumOptions) -> Result<Self> {
        beta.validate()?;
        offspring.validate()?;
        let basis = match (beta.as_constant(), offspring.as_fixed()) {
            (Some(b), Some(p)) => {
                let m: f64 = p.iter().enumerate().map(|(n, q)| n as f64 * q).sum();
                closed_form_spectrum(ou, b * (m - 1.0), opts.k_max)?
            }
            _ => {
                let alpha = |x: &[f64]| beta.eval(x) * (offspring.mean(x) - 1.0);
                galerkin_spectrum(ou, &alpha, opts.galerkin_n, opts.k_max)?
            }
        };
        let model = Self { ou, beta, offspring, basis };
        model.check_pmf_on_grid()?;
        Ok(model)
    }

    pub fn is_supercritical(&self) -> bool {
        self.lambda1() < 0.0
    }

    fn check_pmf_on_grid(&self) -> Result<()> {
        for x in self.basis.grid().nodes() {
            let p = self.offspring.pmf(x);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > PMF_TOLERANCE || p.iter().any(|v| *v < 0.0) {
                return Err(Error::InvalidOffspring { position: x.to_vec(), sum });
            }
        }
        Ok(())
    }

    pub fn ou(&self) -> &OUParams {
        &self.ou
    }

    pub fn beta(&self) -> &RateFn {
        &self.beta
    }

    pub fn offspring(&self) -> &OffspringLaw {
        &self.offspring
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn lambda1(&self) -> f64 {
        self.basis.lambda1()
    }

    /// `α(x) = β(x)(Σ n p_n(x) − 1)`.
    pub fn alpha(&self, x: &[f64]) -> f64 {
        self.beta.eval(x) * (self.offspring.mean(x) - 1.0)
    }

    /// `A(x) = β(x) Σ_{n≥2} (n−1)n p_n(x)`.
    pub fn branching_variance(&self, x: &[f64]) -> f64 {
        self.beta.eval(x) * self.offspring.second_factorial_moment(x)
    }

    /// `sup_x (|α(x)| + A(x))` over the quadrature grid.
    pub fn potential_bound(&self) -> f64 {
        self.basis
            .grid()
            .nodes()
            .map(|x| self.alpha(x).abs() + self.branching_variance(x))
            .fold(0.0, f64::max)
    }
}
