//! Normalized statistics of the central limit theorems and the ensemble
//! tests that compare them against the predicted Gaussian limit laws.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ModelSpec;
use crate::moments::{classify, MomentKernel, Regime};
use crate::particle::{functional, martingale_w, simulate_ensemble, survival_indicator, Configuration, SimConfig, Trajectory};
use crate::spectral::{classify_level, split, FunctionExpansion, LevelClass, SpectralBasis};
use crate::stats::{correlation, ks_test, normal_cdf, normal_pdf, Estimate, KsResult, SampleMoments};

/// Which normalized statistic a scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// `⟨f, X_t⟩ / √⟨φ_1, X_t⟩`
    Small,
    /// `⟨f, X_t⟩ / √(t⟨φ_1, X_t⟩)`
    Critical,
    /// `(⟨f, X_t⟩ − centering) / √⟨φ_1, X_t⟩`, for `f_(c) = 0`
    Large,
    /// `(⟨f, X_t⟩ − centering) / √(t⟨φ_1, X_t⟩)`, for `f_(c) ≠ 0`
    LargeCritical,
}

impl StatisticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatisticKind::Small => "small",
            StatisticKind::Critical => "critical",
            StatisticKind::Large => "large",
            StatisticKind::LargeCritical => "large_critical",
        }
    }

    /// Whether the statistic needs the path continued past `t`.
    pub fn needs_extension(&self) -> bool {
        matches!(self, StatisticKind::Large | StatisticKind::LargeCritical)
    }
}

impl fmt::Display for StatisticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Statistic matching the regime of `f` (which must carry its split).
pub fn statistic_kind(basis: &SpectralBasis, f: &FunctionExpansion) -> Result<StatisticKind> {
    Ok(match classify(basis, f)? {
        Regime::Small => StatisticKind::Small,
        Regime::Critical => StatisticKind::Critical,
        Regime::Large => {
            let parts = split_of(f)?;
            if parts.critical.is_zero() {
                StatisticKind::Large
            } else {
                StatisticKind::LargeCritical
            }
        }
    })
}

fn split_of(f: &FunctionExpansion) -> Result<&crate::spectral::Split> {
    f.split_parts()
        .ok_or_else(|| Error::Precondition("statistic needs an expansion carrying its regime split".into()))
}

/// A test function together with the fixed sparse Hermite coefficients of
/// its pieces, so per-particle evaluation does not rebuild them.
#[derive(Debug, Clone)]
struct Compiled {
    whole: Vec<(usize, f64)>,
    /// `Σ_{k∈S} e^{λ_k Δ} Σ_j a_j^k φ_j^{(k)}`: evaluated at the extended
    /// horizon it gives the `H_{t+Δ}` centering in one pass.
    centering: Vec<(usize, f64)>,
}

impl Compiled {
    fn new(basis: &SpectralBasis, f: &FunctionExpansion, extension: f64) -> Self {
        let lambda1 = basis.lambda1();
        let centering = basis.hermite_coefficients(f.coeffs(), |k| {
            if classify_level(basis.eigenvalue(k), lambda1) == LevelClass::Small {
                (basis.eigenvalue(k) * extension).exp()
            } else {
                0.0
            }
        });
        Self { whole: basis.hermite_coefficients(f.coeffs(), |_| 1.0), centering }
    }
}

fn pairing(basis: &SpectralBasis, coeffs: &[(usize, f64)], config: &Configuration) -> Result<f64> {
    functional(config, &|x: &[f64]| basis.hermite().eval_sparse(coeffs, x))
}

fn phi1_mass(basis: &SpectralBasis, config: &Configuration) -> f64 {
    config.positions().map(|x| basis.eval(0, 0, x)).sum()
}

fn snapshot_at(traj: &Trajectory, t: f64) -> Result<&Configuration> {
    traj.snapshot(t)
        .ok_or_else(|| Error::Precondition(format!("trajectory has no snapshot at t = {t}")))
}

fn require_kind(model: &ModelSpec, f: &FunctionExpansion, expected: StatisticKind) -> Result<()> {
    let actual = statistic_kind(model.basis(), f)?;
    if actual != expected {
        return Err(Error::Precondition(format!(
            "the {expected} statistic does not apply: f calls for the {actual} statistic"
        )));
    }
    Ok(())
}

fn evaluate(
    kind: StatisticKind,
    model: &ModelSpec,
    compiled: &Compiled,
    traj: &Trajectory,
    t: f64,
    extension: f64,
) -> Result<Option<f64>> {
    let basis = model.basis();
    let at_t = snapshot_at(traj, t)?;
    let mass = phi1_mass(basis, at_t);
    if !(mass > 0.0) {
        return Ok(None);
    }
    let value = pairing(basis, &compiled.whole, at_t)?;
    let centered = if kind.needs_extension() {
        let later = snapshot_at(traj, t + extension)?;
        value - pairing(basis, &compiled.centering, later)?
    } else {
        value
    };
    let scale = match kind {
        StatisticKind::Small | StatisticKind::Large => mass,
        StatisticKind::Critical | StatisticKind::LargeCritical => t * mass,
    };
    Ok(Some(centered / scale.sqrt()))
}

/// `⟨f, X_t⟩ / √⟨φ_1, X_t⟩`; `None` when `⟨φ_1, X_t⟩ = 0`.
pub fn stat_small(traj: &Trajectory, model: &ModelSpec, f: &FunctionExpansion, t: f64) -> Result<Option<f64>> {
    require_kind(model, f, StatisticKind::Small)?;
    evaluate(StatisticKind::Small, model, &Compiled::new(model.basis(), f, 0.0), traj, t, 0.0)
}

/// `⟨f, X_t⟩ / √(t⟨φ_1, X_t⟩)`; `None` when `⟨φ_1, X_t⟩ = 0`.
pub fn stat_critical(traj: &Trajectory, model: &ModelSpec, f: &FunctionExpansion, t: f64) -> Result<Option<f64>> {
    require_kind(model, f, StatisticKind::Critical)?;
    evaluate(StatisticKind::Critical, model, &Compiled::new(model.basis(), f, 0.0), traj, t, 0.0)
}

/// Large regime with `f_(c) = 0`: `H_∞^{k,j}` is proxied by `H_{t+Δ}^{k,j}`
/// on the same path, so `traj` needs snapshots at `t` and `t + Δ`.
pub fn stat_large(
    traj: &Trajectory,
    model: &ModelSpec,
    f: &FunctionExpansion,
    t: f64,
    extension: f64,
) -> Result<Option<f64>> {
    require_kind(model, f, StatisticKind::Large)?;
    evaluate(StatisticKind::Large, model, &Compiled::new(model.basis(), f, extension), traj, t, extension)
}

/// Large regime with `f_(c) ≠ 0`: as [`stat_large`] with an extra `t^{-1/2}`.
pub fn stat_large_critical(
    traj: &Trajectory,
    model: &ModelSpec,
    f: &FunctionExpansion,
    t: f64,
    extension: f64,
) -> Result<Option<f64>> {
    require_kind(model, f, StatisticKind::LargeCritical)?;
    evaluate(StatisticKind::LargeCritical, model, &Compiled::new(model.basis(), f, extension), traj, t, extension)
}

/// A theorem check: model, test function, time and ensemble size.
#[derive(Debug, Clone)]
pub struct Scenario {
    model: ModelSpec,
    f: FunctionExpansion,
    t: f64,
    extension: f64,
    n_replicates: usize,
    x0: Vec<f64>,
    pop_cap: usize,
    seed: u64,
    survival_threshold: f64,
    regime: Regime,
    kind: StatisticKind,
}

impl Scenario {
    /// Splits `f`, derives the regime and checks the scenario is well posed.
    pub fn new(model: ModelSpec, f: FunctionExpansion, t: f64, extension: f64, n_replicates: usize) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid("t", format!("must be positive and finite, got {t}")));
        }
        if !(extension >= 0.0 && extension.is_finite()) {
            return Err(invalid("extension", format!("must be nonnegative and finite, got {extension}")));
        }
        if n_replicates == 0 {
            return Err(invalid("n_replicates", "must be at least 1"));
        }
        let basis = model.basis().clone();
        let f = if f.split_parts().is_some() { f } else { split(f, basis.lambda1(), &basis)? };
        let regime = classify(&basis, &f)?;
        let kind = statistic_kind(&basis, &f)?;
        if kind.needs_extension() && extension <= 0.0 {
            return Err(invalid("extension", "large-regime statistics need Δ > 0 for the H_∞ proxy"));
        }
        let x0 = vec![0.0; model.ou().d()];
        Ok(Self {
            model,
            f,
            t,
            extension: if kind.needs_extension() { extension } else { 0.0 },
            n_replicates,
            x0,
            pop_cap: crate::particle::DEFAULT_POP_CAP,
            seed: 0,
            survival_threshold: 0.0,
            regime,
            kind,
        })
    }

    pub fn with_start(mut self, x0: Vec<f64>) -> Result<Self> {
        if x0.len() != self.model.ou().d() || x0.iter().any(|v| !v.is_finite()) {
            return Err(invalid("x0", format!("expected {} finite coordinates, got {x0:?}", self.model.ou().d())));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_pop_cap(mut self, pop_cap: usize) -> Self {
        self.pop_cap = pop_cap;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Conditioning on `W_t ≥ threshold` instead of bare survival.
    pub fn with_survival_threshold(mut self, threshold: f64) -> Self {
        self.survival_threshold = threshold;
        self
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn f(&self) -> &FunctionExpansion {
        &self.f
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn extension(&self) -> f64 {
        self.extension
    }

    pub fn n_replicates(&self) -> usize {
        self.n_replicates
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }

    pub fn kind(&self) -> StatisticKind {
        self.kind
    }

    /// Limit variance of the scenario's statistic.
    pub fn predicted_variance(&self) -> Result<f64> {
        let kernel = MomentKernel::for_model(&self.model)?;
        match self.kind {
            StatisticKind::Small => kernel.sigma2_small(&self.f),
            StatisticKind::Critical => kernel.rho2_critical(&self.f),
            StatisticKind::Large => kernel.large_regime_variance(&self.f),
            StatisticKind::LargeCritical => kernel.rho2_critical(&split_of(&self.f)?.critical),
        }
    }

    /// Limit variance of the statistic as actually computed with the
    /// `H_{t+Δ}` proxy. For `f_(c) = 0` the proxy drops the conditionally
    /// independent increment `H_∞ − H_{t+Δ}`, whose normalized variance
    /// tends to `e^{−λ_1 Δ} β_g²` with `g = Σ_{k∈S} e^{λ_k Δ} f_k`; the
    /// other statistics are returned unchanged.
    pub fn proxy_corrected_variance(&self) -> Result<f64> {
        let v = self.predicted_variance()?;
        if self.kind != StatisticKind::Large {
            return Ok(v);
        }
        let basis = self.model.basis();
        let lambda1 = basis.lambda1();
        let mut terms = Vec::new();
        for (k, level) in self.f.coeffs().iter().enumerate() {
            if basis.level_class(k) != LevelClass::Small {
                continue;
            }
            let w = (basis.eigenvalue(k) * self.extension).exp();
            for (j, &c) in level.iter().enumerate() {
                if c != 0.0 {
                    terms.push((k, j, w * c));
                }
            }
        }
        let g = split(FunctionExpansion::from_eigen_combination(basis, &terms)?, lambda1, basis)?;
        let missing = (-lambda1 * self.extension).exp() * MomentKernel::for_model(&self.model)?.beta2_large(&g)?;
        Ok(v - missing)
    }

    /// `e^{−gΔ}` with `g` the smallest gap `λ_1 − 2λ_k` over the `f_(s)`
    /// levels: the relative size of the variance the `H_{t+Δ}` proxy misses.
    /// Zero for statistics that need no proxy.
    pub fn proxy_bias_factor(&self) -> f64 {
        if !self.kind.needs_extension() {
            return 0.0;
        }
        let basis = self.model.basis();
        let lambda1 = basis.lambda1();
        let gap = self
            .f
            .coeffs()
            .iter()
            .enumerate()
            .filter(|(k, level)| {
                basis.level_class(*k) == LevelClass::Small && level.iter().any(|&c| c != 0.0)
            })
            .map(|(k, _)| lambda1 - 2.0 * basis.eigenvalue(k))
            .fold(f64::INFINITY, f64::min);
        (-gap * self.extension).exp()
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let horizon = self.t + self.extension;
        let times: Vec<f64> = if self.extension > 0.0 { vec![self.t, horizon] } else { vec![self.t] };
        SimConfig::new(&self.model, horizon, &times, self.pop_cap, self.seed)
    }

    /// Simulates the ensemble and evaluates the statistic on every replicate.
    pub fn run(&self) -> Result<Vec<Sample>> {
        self.run_with(|_, _| Ok(()))
    }

    /// As [`Scenario::run`], also handing each trajectory to `inspect`
    /// (for dumps) before it is dropped.
    pub fn run_with<I>(&self, inspect: I) -> Result<Vec<Sample>>
    where
        I: Fn(usize, &Trajectory) -> Result<()> + Sync,
    {
        let cfg = self.sim_config()?;
        let init = Configuration::single(&self.x0);
        let compiled = Compiled::new(self.model.basis(), &self.f, self.extension);
        simulate_ensemble(&self.model, &init, &cfg, self.n_replicates, |i, traj| {
            inspect(i, &traj)?;
            self.sample(i, &traj, &compiled)
        })
    }

    fn sample(&self, replicate: usize, traj: &Trajectory, compiled: &Compiled) -> Result<Sample> {
        let survived = survival_indicator(traj, &self.model, self.survival_threshold);
        let w_t = if traj.capped { None } else { snapshot_at(traj, self.t).ok().map(|c| martingale_w(c, &self.model)) };
        let statistic = match survived {
            Some(true) => evaluate(self.kind, &self.model, compiled, traj, self.t, self.extension)?,
            _ => None,
        };
        Ok(Sample { replicate, survived: survived == Some(true), capped: traj.capped, w_t, statistic })
    }
}

/// Per-replicate outcome. `statistic` is present exactly when the
/// replicate survived, was not capped and had `⟨φ_1, X_t⟩ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub replicate: usize,
    pub survived: bool,
    pub capped: bool,
    pub w_t: Option<f64>,
    pub statistic: Option<f64>,
}

impl Sample {
    pub fn used(&self) -> bool {
        self.survived && !self.capped && self.statistic.is_some()
    }
}

/// Pass thresholds of the limit-law tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub ks_p_min: f64,
    pub variance_rel_tol: f64,
    pub skewness_se: f64,
    pub kurtosis_se: f64,
    pub correlation_se: f64,
    pub mean_se: f64,
    pub min_samples: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            ks_p_min: 0.01,
            variance_rel_tol: 0.10,
            skewness_se: 4.0,
            kurtosis_se: 4.0,
            correlation_se: 4.0,
            mean_se: 4.0,
            min_samples: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Underpowered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub n_replicates: usize,
    pub used: usize,
    pub extinct: usize,
    pub capped: usize,
}

/// Ensemble summary. The raw samples are kept out of the JSON form and
/// written separately with [`write_samples_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    #[serde(skip)]
    pub samples: Vec<Sample>,
    pub predicted_variance: f64,
    pub mean: Option<Estimate>,
    pub empirical_variance: Option<Estimate>,
    pub ks: Option<KsResult>,
    pub skewness: Option<Estimate>,
    pub excess_kurtosis: Option<Estimate>,
    pub independence_corr: Option<Estimate>,
    pub excluded: Tallies,
    pub checks: Vec<Check>,
    pub verdict: Verdict,
}

impl EnsembleReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }
}

/// KS test of `statistic/√v` against N(0,1), variance ratio, skewness,
/// excess kurtosis, mean and `corr(W_t, statistic²)` over the samples with
/// `survived ∧ ¬capped`.
pub fn limit_law_tests(samples: Vec<Sample>, predicted_variance: f64, thresholds: &Thresholds) -> Result<EnsembleReport> {
    if !(predicted_variance > 0.0 && predicted_variance.is_finite()) {
        return Err(invalid("predicted_variance", format!("must be positive and finite, got {predicted_variance}")));
    }
    let capped = samples.iter().filter(|s| s.capped).count();
    let used: Vec<&Sample> = samples.iter().filter(|s| s.used()).collect();
    let excluded = Tallies {
        n_replicates: samples.len(),
        used: used.len(),
        extinct: samples.len() - capped - used.len(),
        capped,
    };
    let mut report = EnsembleReport {
        samples: Vec::new(),
        predicted_variance,
        mean: None,
        empirical_variance: None,
        ks: None,
        skewness: None,
        excess_kurtosis: None,
        independence_corr: None,
        excluded,
        checks: Vec::new(),
        verdict: Verdict::Underpowered,
    };
    // at least four points are needed for the kurtosis standard error
    if used.len() >= 4 {
        let stats: Vec<f64> = used.iter().map(|s| s.statistic.expect("used samples carry a statistic")).collect();
        let w: Vec<f64> = used.iter().map(|s| s.w_t.unwrap_or(0.0)).collect();
        let squares: Vec<f64> = stats.iter().map(|v| v * v).collect();
        let m = SampleMoments::of(&stats);
        let sd = predicted_variance.sqrt();
        let ks = ks_test(&stats, |x| normal_cdf(x / sd));
        let corr = correlation(&w, &squares);
        let ratio = m.variance.value / predicted_variance - 1.0;
        let rel = |e: &Estimate| if e.se > 0.0 { e.value.abs() / e.se } else { f64::INFINITY };
        report.checks = vec![
            Check { name: "ks_p_value".into(), value: ks.p_value, limit: thresholds.ks_p_min, passed: ks.p_value >= thresholds.ks_p_min },
            Check {
                name: "variance_ratio".into(),
                value: ratio,
                limit: thresholds.variance_rel_tol,
                passed: ratio.abs() <= thresholds.variance_rel_tol,
            },
            Check { name: "mean_in_se".into(), value: rel(&m.mean), limit: thresholds.mean_se, passed: rel(&m.mean) <= thresholds.mean_se },
            Check {
                name: "skewness_in_se".into(),
                value: rel(&m.skewness),
                limit: thresholds.skewness_se,
                passed: rel(&m.skewness) <= thresholds.skewness_se,
            },
            Check {
                name: "excess_kurtosis_in_se".into(),
                value: rel(&m.excess_kurtosis),
                limit: thresholds.kurtosis_se,
                passed: rel(&m.excess_kurtosis) <= thresholds.kurtosis_se,
            },
            Check {
                name: "independence_corr_in_se".into(),
                value: rel(&corr),
                limit: thresholds.correlation_se,
                passed: rel(&corr) <= thresholds.correlation_se,
            },
        ];
        report.mean = Some(m.mean);
        report.empirical_variance = Some(m.variance);
        report.ks = Some(ks);
        report.skewness = Some(m.skewness);
        report.excess_kurtosis = Some(m.excess_kurtosis);
        report.independence_corr = Some(corr);
    }
    report.verdict = if used.len() < thresholds.min_samples {
        Verdict::Underpowered
    } else if report.checks.iter().all(|c| c.passed) {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    report.samples = samples;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `replicate,survived,capped,W_t,statistic`; missing values are empty.
pub fn write_samples_csv<W: Write>(out: &mut W, samples: &[Sample]) -> io::Result<()> {
    writeln!(out, "replicate,survived,capped,W_t,statistic")?;
    for s in samples {
        writeln!(out, "{},{},{},{},{}", s.replicate, s.survived, s.capped, opt(s.w_t), opt(s.statistic))?;
    }
    Ok(())
}

/// Histogram of the used statistics against the predicted `N(0, v)`
/// density: `bin_left,bin_right,count,empirical_density,predicted_density`.
pub fn write_histogram_csv<W: Write>(out: &mut W, report: &EnsembleReport, bins: usize) -> io::Result<()> {
    writeln!(out, "bin_left,bin_right,count,empirical_density,predicted_density")?;
    let values: Vec<f64> = report.samples.iter().filter(|s| s.used()).filter_map(|s| s.statistic).collect();
    if values.is_empty() || bins == 0 {
        return Ok(());
    }
    let sd = report.predicted_variance.sqrt();
    let lo = values.iter().copied().fold(-4.0 * sd, f64::min);
    let hi = values.iter().copied().fold(4.0 * sd, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = values.len() as f64;
    for (i, &c) in counts.iter().enumerate() {
        let left = lo + i as f64 * width;
        let mid = left + 0.5 * width;
        writeln!(
            out,
            "{},{},{},{},{}",
            left,
            left + width,
            c,
            c as f64 / (n * width),
            normal_pdf(mid / sd) / sd
        )?;
    }
    Ok(())
}

/// Mean squared distance at one time of the L² convergence check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Row {
    pub t: f64,
    pub mean_square: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Report {
    pub horizon: f64,
    pub rows: Vec<L2Row>,
    /// Paired differences `E d_{t_i}² − E d_{t_{i+1}}²` with standard errors.
    pub decrements: Vec<Estimate>,
    /// Every decrement exceeds `−2·SE`.
    pub monotone: bool,
    pub capped: usize,
    pub n_replicates: usize,
}

/// Empirical `E|e^{λ_γ t}⟨f, X_t⟩ − Σ_j a_j^γ H_T^{γ,j}|²` for each `t` in
/// `times`, with `H_∞` proxied at `T = max(times) + Δ`. Requires the large
/// regime. Extinct replicates contribute zero; capped ones are dropped.
pub fn l2_convergence_check(
    model: &ModelSpec,
    f: &FunctionExpansion,
    times: &[f64],
    extension: f64,
    x0: &[f64],
    n_replicates: usize,
    pop_cap: usize,
    seed: u64,
) -> Result<L2Report> {
    let basis = model.basis();
    let regime = classify(basis, f)?;
    if regime != Regime::Large {
        return Err(Error::RegimeMismatch { expected: Regime::Large.as_str(), actual: regime });
    }
    if times.is_empty() || times.windows(2).any(|w| !(w[0] < w[1])) || !(times[0] > 0.0) {
        return Err(invalid("times", "must be positive and strictly ascending"));
    }
    if !(extension >= 0.0) {
        return Err(invalid("extension", format!("must be nonnegative, got {extension}")));
    }
    let gamma = f.gamma().expect("classified functions have a leading level");
    let lg = basis.eigenvalue(gamma);
    let horizon = times[times.len() - 1] + extension;
    let whole = basis.hermite_coefficients(f.coeffs(), |_| 1.0);
    let leading = basis.hermite_coefficients(f.coeffs(), |k| if k == gamma { 1.0 } else { 0.0 });
    let mut snaps = times.to_vec();
    if extension > 0.0 {
        snaps.push(horizon);
    }
    let cfg = SimConfig::new(model, horizon, &snaps, pop_cap, seed)?;
    let init = Configuration::single(x0);
    let rows: Vec<Option<Vec<f64>>> = simulate_ensemble(model, &init, &cfg, n_replicates, |_, traj| {
        if traj.capped {
            return Ok(None);
        }
        let limit = (lg * horizon).exp() * pairing(basis, &leading, snapshot_at(&traj, horizon)?)?;
        let mut d2 = Vec::with_capacity(times.len());
        for &t in times {
            let v = (lg * t).exp() * pairing(basis, &whole, snapshot_at(&traj, t)?)?;
            d2.push((v - limit).powi(2));
        }
        Ok(Some(d2))
    })?;
    let complete: Vec<&Vec<f64>> = rows.iter().flatten().collect();
    let column = |i: usize| -> Vec<f64> { complete.iter().map(|r| r[i]).collect() };
    let mean_se = |v: &[f64]| -> Estimate {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Estimate { value: m, se: (var / n).sqrt() }
    };
    let rows_out: Vec<L2Row> = times.iter().enumerate().map(|(i, &t)| L2Row { t, mean_square: mean_se(&column(i)) }).collect();
    let decrements: Vec<Estimate> = (1..times.len())
        .map(|i| {
            let diff: Vec<f64> = complete.iter().map(|r| r[i - 1] - r[i]).collect();
            mean_se(&diff)
        })
        .collect();
    let monotone = decrements.iter().all(|d| d.value >= -2.0 * d.se);
    Ok(L2Report {
        horizon,
        rows: rows_out,
        decrements,
        monotone,
        capped: n_replicates - complete.len(),
        n_replicates,
    })
}

/// Empirical moments of `⟨f, X_t⟩` from a single particle at `x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalMoments {
    pub mean: Estimate,
    pub second_moment: Estimate,
    pub used: usize,
    pub capped: usize,
}

/// Monte Carlo mean and second moment of `⟨f, X_t⟩`, unconditionally
/// (extinct replicates count as zero; capped ones are dropped and counted).
pub fn functional_moments(
    model: &ModelSpec,
    f: &FunctionExpansion,
    t: f64,
    x0: &[f64],
    n_replicates: usize,
    pop_cap: usize,
    seed: u64,
) -> Result<FunctionalMoments> {
    let basis = model.basis();
    let coeffs = basis.hermite_coefficients(f.coeffs(), |_| 1.0);
    let cfg = SimConfig::new(model, t, &[t], pop_cap, seed)?;
    let init = Configuration::single(x0);
    let values: Vec<Option<f64>> = simulate_ensemble(model, &init, &cfg, n_replicates, |_, traj| {
        if traj.capped {
            Ok(None)
        } else {
            pairing(basis, &coeffs, traj.final_snapshot()).map(Some)
        }
    })?;
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.len() < 2 {
        return Err(Error::Precondition(format!("only {} uncapped replicates", v.len())));
    }
    let sq: Vec<f64> = v.iter().map(|x| x * x).collect();
    let m1 = SampleMoments::of(&v);
    let m2 = SampleMoments::of(&sq);
    Ok(FunctionalMoments { mean: m1.mean, second_moment: m2.mean, used: v.len(), capped: n_replicates - v.len() })
}
