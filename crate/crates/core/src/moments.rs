//! Mean semigroup, the exact second-moment formula and the limiting variance
//! functionals of the three branching-rate regimes.
//!
//! The infinite time integrals are expanded bilinearly over eigen-levels so
//! each term integrates in closed form; the `*_quadrature` variants evaluate
//! the same integrals by adaptive quadrature as a cross-check.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quadrature::{integrate, integrate_tail, Integral};
use crate::spectral::{classify_level, FunctionExpansion, LevelClass, SpectralBasis};

/// Branching-rate regime of a test function, from the sign of
/// `λ_1 − 2λ_{γ(f)}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `λ_1 > 2λ_{γ(f)}`
    Large,
    /// `λ_1 = 2λ_{γ(f)}`
    Critical,
    /// `λ_1 < 2λ_{γ(f)}`
    Small,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Large => "large",
            Regime::Critical => "critical",
            Regime::Small => "small",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Regime of `f`. Fails for the zero function, which has no `γ(f)`.
pub fn classify(basis: &SpectralBasis, f: &FunctionExpansion) -> Result<Regime> {
    let gamma = f
        .gamma()
        .ok_or_else(|| Error::Precondition("the zero function has no regime".into()))?;
    Ok(match classify_level(basis.eigenvalue(gamma), basis.lambda1()) {
        LevelClass::Small => Regime::Large,
        LevelClass::Critical => Regime::Critical,
        LevelClass::Large => Regime::Small,
    })
}

fn require(basis: &SpectralBasis, f: &FunctionExpansion, expected: Regime) -> Result<usize> {
    let actual = classify(basis, f)?;
    if actual != expected {
        return Err(Error::RegimeMismatch { expected: expected.as_str(), actual });
    }
    Ok(f.gamma().expect("classified functions have a leading level"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
    pub quadrature_error_estimate: f64,
    pub truncation_level: usize,
}

/// The variance functionals need only the spectral basis and `A` on the
/// quadrature nodes. Building one directly allows `A` profiles that no
/// offspring law realizes.
#[derive(Debug, Clone)]
pub struct MomentKernel {
    basis: SpectralBasis,
    a_nodes: Vec<f64>,
}

impl MomentKernel {
    pub fn new<A: Fn(&[f64]) -> f64 + ?Sized>(basis: &SpectralBasis, a: &A) -> Result<Self> {
        let a_nodes = basis.grid().sample(a)?;
        Ok(Self { basis: basis.clone(), a_nodes })
    }

    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        Self::new(model.basis(), &|x: &[f64]| model.branching_variance(x))
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    fn level_nodes(&self, f: &FunctionExpansion) -> Vec<Option<Vec<f64>>> {
        f.coeffs()
            .iter()
            .enumerate()
            .map(|(k, level)| {
                if level.iter().all(|a| *a == 0.0) {
                    return None;
                }
                Some(self.basis.reconstruct_nodes(f.coeffs(), |m| if m == k { 1.0 } else { 0.0 }))
            })
            .collect()
    }

    // ⟨A g h, φ_1⟩
    fn a_pairing(&self, g: &[f64], h: &[f64]) -> f64 {
        let grid = self.basis.grid();
        let phi1 = self.basis.phi1_nodes();
        grid.weights()
            .iter()
            .zip(&self.a_nodes)
            .zip(g.iter().zip(h))
            .zip(phi1)
            .map(|(((w, a), (x, y)), p)| w * a * x * y * p)
            .sum()
    }

    fn square_pairing(&self, values: &[f64]) -> f64 {
        self.basis.grid().dot3(values, values, self.basis.phi1_nodes())
    }

    /// `Σ_{k,l} ⟨A g_k g_l, φ_1⟩ · weight(λ_k + λ_l)` over the nonzero level
    /// slices `g_k` of `f`, restricted to levels accepted by `keep`.
    fn bilinear(&self, f: &FunctionExpansion, keep: impl Fn(usize) -> bool, weight: impl Fn(f64) -> f64) -> f64 {
        let slices = self.level_nodes(f);
        let active: Vec<(usize, &Vec<f64>)> = slices
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.as_ref().filter(|_| keep(k)).map(|v| (k, v)))
            .collect();
        let mut total = 0.0;
        for (i, &(k, gk)) in active.iter().enumerate() {
            for &(l, gl) in &active[i..] {
                let mult = if k == l { 1.0 } else { 2.0 };
                let w = weight(self.basis.eigenvalue(k) + self.basis.eigenvalue(l));
                total += mult * w * self.a_pairing(gk, gl);
            }
        }
        total
    }

    /// `σ_f² = ∫_0^∞ e^{λ_1 s}⟨A(T_s f)², φ_1⟩ ds + ⟨f², φ_1⟩` (small regime).
    pub fn sigma2_small(&self, f: &FunctionExpansion) -> Result<f64> {
        require(&self.basis, f, Regime::Small)?;
        let lambda1 = self.basis.lambda1();
        let integral = self.bilinear(f, |_| true, |sum| 1.0 / (sum - lambda1));
        Ok(integral + self.square_pairing(f.node_values()))
    }

    /// Same integral by adaptive quadrature with an exponential tail cutoff.
    pub fn sigma2_small_quadrature(&self, f: &FunctionExpansion) -> Result<Integral> {
        let gamma = require(&self.basis, f, Regime::Small)?;
        let lambda1 = self.basis.lambda1();
        let slices = self.level_nodes(f);
        let decay = 2.0 * self.basis.eigenvalue(gamma) - lambda1;
        let integrand = |s: f64| {
            let ts = self.evolve_nodes(&slices, s);
            (lambda1 * s).exp() * self.a_pairing(&ts, &ts)
        };
        let mut out = integrate_tail(integrand, 0.0, decay, 1e-12, 400)?;
        out.value += self.square_pairing(f.node_values());
        Ok(out)
    }

    // node values of T_s f from its level slices
    fn evolve_nodes(&self, slices: &[Option<Vec<f64>>], s: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.grid().len()];
        for (k, slice) in slices.iter().enumerate() {
            if let Some(v) = slice {
                let e = (-self.basis.eigenvalue(k) * s).exp();
                out.iter_mut().zip(v).for_each(|(o, x)| *o += e * x);
            }
        }
        out
    }

    /// `ρ_f² = ⟨A f_1², φ_1⟩` (critical regime).
    pub fn rho2_critical(&self, f: &FunctionExpansion) -> Result<f64> {
        let gamma = require(&self.basis, f, Regime::Critical)?;
        let lead = self.basis.reconstruct_nodes(f.coeffs(), |k| if k == gamma { 1.0 } else { 0.0 });
        Ok(self.a_pairing(&lead, &lead))
    }

    /// `β_f²` of the large regime: the `f_(s)` part of the second moment of
    /// `H_∞` minus `⟨f_(s)², φ_1⟩`.
    pub fn beta2_large(&self, f: &FunctionExpansion) -> Result<f64> {
        require(&self.basis, f, Regime::Large)?;
        let basis = &self.basis;
        let lambda1 = basis.lambda1();
        let small = |k: usize| classify_level(basis.eigenvalue(k), lambda1) == LevelClass::Small;
        let integral = self.bilinear(f, small, |sum| {
            let rate = lambda1 - sum;
            assert!(rate > 0.0, "pair of f_(s) levels with λ_1 − λ_k − λ_l = {rate} ≤ 0");
            1.0 / rate
        });
        let fs = basis.reconstruct_nodes(f.coeffs(), |k| if small(k) { 1.0 } else { 0.0 });
        Ok(integral - self.square_pairing(&fs))
    }

    /// `σ_{f_(l)}² + β_f²`, the limit variance when `f_(c) = 0`.
    pub fn large_regime_variance(&self, f: &FunctionExpansion) -> Result<f64> {
        let parts = f
            .split_parts()
            .ok_or_else(|| Error::Precondition("large-regime variance needs a split expansion".into()))?;
        if !parts.critical.is_zero() {
            return Err(Error::Precondition("f_(c) ≠ 0: the t^{-1/2} normalization applies".into()));
        }
        let beta2 = self.beta2_large(f)?;
        let sigma2 = if parts.large.gamma().is_some() { self.sigma2_small(&parts.large)? } else { 0.0 };
        Ok(beta2 + sigma2)
    }

    /// `η_f²(x) = ∫_0^∞ e^{2λ_γ s} T_s(A f_1²)(x) ds` (large regime).
    pub fn eta2_large(&self, f: &FunctionExpansion, x: &[f64]) -> Result<f64> {
        let gamma = require(&self.basis, f, Regime::Large)?;
        let lg = self.basis.eigenvalue(gamma);
        let c = self.project_a_leading_square(f, gamma);
        let mut total = 0.0;
        for (m, level) in c.iter().enumerate() {
            let rate = self.basis.eigenvalue(m) - 2.0 * lg;
            for (j, &cm) in level.iter().enumerate() {
                total += cm * self.basis.eval(m, j, x) / rate;
            }
        }
        Ok(total)
    }

    pub fn eta2_large_quadrature(&self, f: &FunctionExpansion, x: &[f64]) -> Result<Integral> {
        let gamma = require(&self.basis, f, Regime::Large)?;
        let lg = self.basis.eigenvalue(gamma);
        let c = self.project_a_leading_square(f, gamma);
        let phi_x: Vec<Vec<f64>> = c
            .iter()
            .enumerate()
            .map(|(m, level)| (0..level.len()).map(|j| self.basis.eval(m, j, x)).collect())
            .collect();
        let integrand = |s: f64| {
            let mut v = 0.0;
            for (m, level) in c.iter().enumerate() {
                let e = ((2.0 * lg - self.basis.eigenvalue(m)) * s).exp();
                v += e * level.iter().zip(&phi_x[m]).map(|(a, p)| a * p).sum::<f64>();
            }
            v
        };
        integrate_tail(integrand, 0.0, self.basis.lambda1() - 2.0 * lg, 1e-12, 400)
    }

    fn project_a_leading_square(&self, f: &FunctionExpansion, gamma: usize) -> Vec<Vec<f64>> {
        let lead = self.basis.reconstruct_nodes(f.coeffs(), |k| if k == gamma { 1.0 } else { 0.0 });
        let h: Vec<f64> = lead.iter().zip(&self.a_nodes).map(|(v, a)| a * v * v).collect();
        self.basis.project(&h)
    }

    /// `−(1/λ_1) ∫ A φ_1³ dμ`.
    pub fn remark_phi1_variance(&self) -> f64 {
        let phi1 = self.basis.phi1_nodes();
        -self.a_pairing(phi1, phi1) / self.basis.lambda1()
    }

    /// `P_{δ_x}⟨f, X_t⟩²` from
    /// `∫_0^t T_s[A (T_{t−s} f)²](x) ds + T_t(f²)(x)`.
    pub fn second_moment(&self, f: &FunctionExpansion, t: f64, x: &[f64], max_panels: usize) -> Result<MomentReport> {
        if !(t > 0.0) {
            return Err(Error::Precondition(format!("second moment needs t > 0, got {t}")));
        }
        let basis = &self.basis;
        let grid = basis.grid();
        let slices = self.level_nodes(f);
        let phi_x: Vec<Vec<f64>> = (0..basis.num_levels())
            .map(|k| (0..basis.multiplicity(k)).map(|j| basis.eval(k, j, x)).collect())
            .collect();
        let apply_semigroup_at_x = |c: &[Vec<f64>], s: f64| -> f64 {
            c.iter()
                .enumerate()
                .map(|(k, level)| {
                    (-basis.eigenvalue(k) * s).exp() * level.iter().zip(&phi_x[k]).map(|(a, p)| a * p).sum::<f64>()
                })
                .sum()
        };
        let projection_residual = |h: &[f64], c: &[Vec<f64>]| -> f64 {
            let rec = basis.reconstruct_nodes(c, |_| 1.0);
            let d: Vec<f64> = h.iter().zip(&rec).map(|(a, b)| a - b).collect();
            grid.dot(&d, &d).sqrt()
        };
        let source = |s: f64| -> Vec<f64> {
            let tf = self.evolve_nodes(&slices, t - s);
            tf.iter().zip(&self.a_nodes).map(|(v, a)| a * v * v).collect()
        };

        let integral = integrate(
            |s| {
                let h = source(s);
                apply_semigroup_at_x(&basis.project(&h), s)
            },
            0.0,
            t,
            1e-14,
            1e-12,
            max_panels,
        )?;
        let lambda1 = basis.lambda1();
        // the projection residual is a diagnostic bound sitting at the
        // round-off floor, so a fixed composite Simpson rule is enough
        let residual_weight = simpson(
            |s| {
                let h = source(s);
                (-lambda1 * s).exp() * projection_residual(&h, &basis.project(&h))
            },
            0.0,
            t,
            RESIDUAL_PANELS,
        );

        let f2: Vec<f64> = f.node_values().iter().map(|v| v * v).collect();
        let c2 = basis.project(&f2);
        let tail = apply_semigroup_at_x(&c2, t);
        let tail_residual = (-lambda1 * t).exp() * projection_residual(&f2, &c2);

        let mean = f.eval_semigroup(t, x);
        let second_moment = integral.value + tail;
        Ok(MomentReport {
            mean,
            second_moment,
            variance: second_moment - mean * mean,
            quadrature_error_estimate: integral.error + residual_weight + tail_residual,
            truncation_level: basis.num_levels(),
        })
    }
}

const RESIDUAL_PANELS: usize = 32;

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    let n = 2 * panels;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        sum += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    sum * h / 3.0
}

/// `T_t f(x) = Σ_k e^{−λ_k t} Σ_j a_j^k φ_j^{(k)}(x)`.
pub fn mean_tt(_model: &ModelSpec, f: &FunctionExpansion, t: f64, x: &[f64]) -> f64 {
    f.eval_semigroup(t, x)
}

pub fn second_moment(model: &ModelSpec, f: &FunctionExpansion, t: f64, x: &[f64], max_panels: usize) -> Result<MomentReport> {
    MomentKernel::for_model(model)?.second_moment(f, t, x, max_panels)
}

pub fn sigma2_small(model: &ModelSpec, f: &FunctionExpansion) -> Result<f64> {
    MomentKernel::for_model(model)?.sigma2_small(f)
}

pub fn rho2_critical(model: &ModelSpec, f: &FunctionExpansion) -> Result<f64> {
    MomentKernel::for_model(model)?.rho2_critical(f)
}

pub fn beta2_large(model: &ModelSpec, f: &FunctionExpansion) -> Result<f64> {
    MomentKernel::for_model(model)?.beta2_large(f)
}

pub fn eta2_large(model: &ModelSpec, f: &FunctionExpansion, x: &[f64]) -> Result<f64> {
    MomentKernel::for_model(model)?.eta2_large(f, x)
}

pub fn remark_phi1_variance(model: &ModelSpec) -> Result<f64> {
    Ok(MomentKernel::for_model(model)?.remark_phi1_variance())
}
