//! Experiment configuration: a TOML file with `[model]`, `[function]`,
//! `[scenario]`, `[thresholds]` and `[output]` sections. Unknown keys are
//! rejected so a typo never silently falls back to a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use bcl_core::spectral::{expand, split};
use bcl_core::verify::Thresholds;
use bcl_core::{FunctionExpansion, ModelSpec, OUParams, OffspringLaw, RateFn, SpectrumOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelBlock,
    #[serde(default)]
    pub function: FunctionBlock,
    #[serde(default)]
    pub scenario: ScenarioBlock,
    #[serde(default)]
    pub thresholds: ThresholdBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one")]
    pub sigma2: f64,
    #[serde(default = "one_usize")]
    pub d: usize,
    pub beta: BetaSpec,
    pub offspring: OffspringSpec,
    /// Number of eigen-levels kept; defaults depend on `d`.
    pub k_max: Option<usize>,
    /// Hermite degree of the Galerkin basis for position-dependent models.
    pub galerkin_n: Option<usize>,
    /// Set to false to simulate critical or subcritical systems; the
    /// variance and verify pipelines still require `λ_1 < 0`.
    #[serde(default = "yes")]
    pub require_supercritical: bool,
}

/// A constant rate or a Gaussian bump `base + amplitude·exp(−‖x‖²/width²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSpec {
    Constant(f64),
    Bump(BumpSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub base: f64,
    pub amplitude: f64,
    pub width: f64,
}

/// A fixed offspring table `[p_0, p_1, …]` or a position-dependent blend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OffspringSpec {
    Fixed(Vec<f64>),
    Mixture(MixtureSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub inner: Vec<f64>,
    pub outer: Vec<f64>,
    pub width: f64,
}

/// Sum of eigenfunction terms and monomials. Levels and indices are
/// one-based, matching `φ_j^{(k)}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionBlock {
    #[serde(default)]
    pub eigen: Vec<EigenTerm>,
    #[serde(default)]
    pub monomials: Vec<Monomial>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenTerm {
    pub level: usize,
    #[serde(default = "one_usize")]
    pub index: usize,
    #[serde(default = "one")]
    pub coeff: f64,
}

/// `coeff · Π_r x_r^{powers[r]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub powers: Vec<u32>,
    #[serde(default = "one")]
    pub coeff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    #[serde(default = "one")]
    pub t: f64,
    /// Extra horizon Δ for the large-regime centering; defaults to `t`.
    pub extension: Option<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_pop_cap")]
    pub pop_cap: usize,
    #[serde(default)]
    pub seed: u64,
    /// Starting position of the single initial particle; the origin by default.
    pub x0: Option<Vec<f64>>,
    /// Extra snapshot times for `simulate`.
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    /// Condition on `W_t ≥ survival_threshold` instead of bare survival.
    #[serde(default)]
    pub survival_threshold: f64,
    /// Refuse to run unless `f` falls in this regime.
    pub expect_regime: Option<String>,
    /// Compare against the finite-Δ prediction of the large-regime statistic.
    #[serde(default)]
    pub proxy_correction: bool,
    /// Also run the L² convergence check at these times (large regime).
    #[serde(default)]
    pub l2_times: Vec<f64>,
}

impl Default for ScenarioBlock {
    fn default() -> Self {
        Self {
            t: 1.0,
            extension: None,
            replicates: default_replicates(),
            pop_cap: default_pop_cap(),
            seed: 0,
            x0: None,
            snapshot_times: Vec::new(),
            survival_threshold: 0.0,
            expect_regime: None,
            proxy_correction: false,
            l2_times: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdBlock {
    pub ks_p_min: Option<f64>,
    pub variance_rel_tol: Option<f64>,
    pub skewness_se: Option<f64>,
    pub kurtosis_se: Option<f64>,
    pub correlation_se: Option<f64>,
    pub mean_se: Option<f64>,
    pub min_samples: Option<usize>,
    /// Multiplies the predicted variance before testing (negative controls).
    pub variance_override_factor: Option<f64>,
}

impl ThresholdBlock {
    pub fn thresholds(&self) -> Thresholds {
        let d = Thresholds::default();
        Thresholds {
            ks_p_min: self.ks_p_min.unwrap_or(d.ks_p_min),
            variance_rel_tol: self.variance_rel_tol.unwrap_or(d.variance_rel_tol),
            skewness_se: self.skewness_se.unwrap_or(d.skewness_se),
            kurtosis_se: self.kurtosis_se.unwrap_or(d.kurtosis_se),
            correlation_se: self.correlation_se.unwrap_or(d.correlation_se),
            mean_se: self.mean_se.unwrap_or(d.mean_se),
            min_samples: self.min_samples.unwrap_or(d.min_samples),
        }
    }

    pub fn override_factor(&self) -> f64 {
        self.variance_override_factor.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Write every particle position to `trajectory.csv`.
    #[serde(default)]
    pub trajectory: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_dir(), trajectory: false, histogram_bins: default_bins() }
    }
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn one_usize() -> usize {
    1
}

fn default_replicates() -> usize {
    1000
}

fn default_pop_cap() -> usize {
    bcl_core::particle::DEFAULT_POP_CAP
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_bins() -> usize {
    40
}

/// Bundled configurations, one per limit theorem scenario.
pub const PRESETS: &[(&str, &str)] = &[
    ("yule", include_str!("../presets/yule.toml")),
    ("small", include_str!("../presets/small.toml")),
    ("critical", include_str!("../presets/critical.toml")),
    ("large", include_str!("../presets/large.toml")),
    ("large-phi1", include_str!("../presets/large-phi1.toml")),
    ("l2-convergence", include_str!("../presets/l2-convergence.toml")),
    ("large-critical", include_str!("../presets/large-critical.toml")),
    ("large-critical-extra", include_str!("../presets/large-critical-extra.toml")),
];

pub fn preset(name: &str) -> anyhow::Result<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text).with_context(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        format!("unknown preset `{name}`; available: {}", names.join(", "))
    })
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    fn validate(&self) -> anyhow::Result<()> {
        let s = &self.scenario;
        if !(s.t > 0.0 && s.t.is_finite()) {
            bail!("scenario.t: must be positive and finite, got {}", s.t);
        }
        if let Some(e) = s.extension {
            if !(e >= 0.0 && e.is_finite()) {
                bail!("scenario.extension: must be nonnegative and finite, got {e}");
            }
        }
        if s.replicates == 0 {
            bail!("scenario.replicates: must be at least 1");
        }
        if s.pop_cap == 0 {
            bail!("scenario.pop_cap: must be at least 1");
        }
        if let Some(x0) = &s.x0 {
            if x0.len() != self.model.d {
                bail!("scenario.x0: expected {} coordinates, got {}", self.model.d, x0.len());
            }
        }
        if let Some(r) = &s.expect_regime {
            if !["small", "critical", "large"].contains(&r.as_str()) {
                bail!("scenario.expect_regime: must be small, critical or large, got `{r}`");
            }
        }
        if let Some(f) = self.thresholds.variance_override_factor {
            if !(f > 0.0 && f.is_finite()) {
                bail!("thresholds.variance_override_factor: must be positive, got {f}");
            }
        }
        for (i, t) in self.function.eigen.iter().enumerate() {
            if t.level == 0 || t.index == 0 {
                bail!("function.eigen[{i}]: level and index are one-based");
            }
        }
        for (i, m) in self.function.monomials.iter().enumerate() {
            if m.powers.len() != self.model.d {
                bail!("function.monomials[{i}].powers: expected {} exponents, got {}", self.model.d, m.powers.len());
            }
        }
        Ok(())
    }

    /// Canonical TOML of the effective configuration (after overrides).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("configurations always serialize")
    }

    /// SHA-256 of [`ExperimentConfig::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn extension(&self) -> f64 {
        self.scenario.extension.unwrap_or(self.scenario.t)
    }

    pub fn x0(&self) -> Vec<f64> {
        self.scenario.x0.clone().unwrap_or_else(|| vec![0.0; self.model.d])
    }

    pub fn build_model(&self) -> bcl_core::Result<ModelSpec> {
        let m = &self.model;
        let ou = OUParams::new(m.b, m.sigma2, m.d)?;
        let beta = match &m.beta {
            BetaSpec::Constant(c) => RateFn::Constant(*c),
            BetaSpec::Bump(b) => RateFn::Bump { base: b.base, amplitude: b.amplitude, width: b.width },
        };
        let offspring = match &m.offspring {
            OffspringSpec::Fixed(p) => OffspringLaw::Fixed(p.clone()),
            OffspringSpec::Mixture(x) => OffspringLaw::Mixture { inner: x.inner.clone(), outer: x.outer.clone(), width: x.width },
        };
        let mut opts = SpectrumOptions::for_dimension(m.d);
        if let Some(k) = m.k_max {
            opts.k_max = k;
        }
        if let Some(n) = m.galerkin_n {
            opts.galerkin_n = n;
        }
        if m.require_supercritical {
            ModelSpec::with_options(ou, beta, offspring, opts)
        } else {
            ModelSpec::for_simulation(ou, beta, offspring, opts)
        }
    }

    /// The test function, expanded in the model's eigenbasis and split by
    /// regime.
    pub fn build_function(&self, model: &ModelSpec) -> bcl_core::Result<FunctionExpansion> {
        let basis = model.basis();
        let block = &self.function;
        let terms: Vec<(usize, usize, f64)> = block.eigen.iter().map(|t| (t.level - 1, t.index - 1, t.coeff)).collect();
        let eigen_part = FunctionExpansion::from_eigen_combination(basis, &terms)?;
        let f = if block.monomials.is_empty() {
            eigen_part
        } else {
            let monomials = block.monomials.clone();
            let poly = move |x: &[f64]| -> f64 {
                monomials
                    .iter()
                    .map(|m| m.coeff * x.iter().zip(&m.powers).map(|(v, &p)| v.powi(p as i32)).product::<f64>())
                    .sum()
            };
            let combined = |x: &[f64]| poly(x) + eigen_part.eval(x);
            expand(&combined, basis, None)?
        };
        split(f, model.lambda1(), basis)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
beta = 1.0
offspring = [0.2, 0.0, 0.8]

[function]
eigen = [{ level = 2 }]
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.b, 1.0);
        assert_eq!(cfg.scenario.replicates, 1000);
        assert_eq!(cfg.extension(), cfg.scenario.t);
        let model = cfg.build_model().unwrap();
        let f = cfg.build_function(&model).unwrap();
        assert_eq!(f.coeff(1, 0), 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("beta = 1.0", "beta = 1.0\nbta = 2.0");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("bta"), "{err}");
        let text = format!("{MINIMAL}\n[scenario]\nreplicate = 3\n");
        assert!(ExperimentConfig::parse(&text).is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let text = format!("{MINIMAL}\n[scenario]\nt = -1.0\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("scenario.t"), "{err}");
        let text = MINIMAL.replace("level = 2", "level = 0");
        assert!(ExperimentConfig::parse(&text).unwrap_err().to_string().contains("one-based"));
    }

    #[test]
    fn monomial_matches_eigenfunction() {
        // φ_2(x) = √2·x for b = σ² = 1
        let text = MINIMAL.replace("eigen = [{ level = 2 }]", "monomials = [{ powers = [1], coeff = 1.4142135623730951 }]");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let model = cfg.build_model().unwrap();
        let f = cfg.build_function(&model).unwrap();
        assert!((f.coeff(1, 0) - 1.0).abs() < 1e-12);
        assert!(f.coeff(0, 0).abs() < 1e-12);
    }

    #[test]
    fn bump_and_mixture_parse() {
        let text = r#"
[model]
beta = { base = 1.0, amplitude = 0.5, width = 1.5 }
offspring = { inner = [0.0, 0.0, 1.0], outer = [0.1, 0.0, 0.9], width = 2.0 }
k_max = 6
galerkin_n = 20
"#;
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert!(matches!(cfg.model.beta, BetaSpec::Bump(_)));
        assert!(matches!(cfg.model.offspring, OffspringSpec::Mixture(_)));
    }

    #[test]
    fn hash_tracks_effective_values() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.scenario.seed = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn every_preset_parses_and_builds() {
        for (name, text) in PRESETS {
            let cfg = ExperimentConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e:#}"));
            let model = cfg.build_model().unwrap();
            cfg.build_function(&model).unwrap();
        }
    }
}
