//! Spectral and variance computations checked against oracles built here
//! from scratch: a finite-difference discretization of the generator and
//! hand-derived Gaussian integrals.

use bcl_core::moments::{beta2_large, eta2_large, rho2_critical, second_moment, sigma2_small, MomentKernel};
use bcl_core::spectral::{galerkin_spectrum, split};
use bcl_core::{FunctionExpansion, ModelSpec, OUParams, OffspringLaw, RateFn};
use nalgebra::{DMatrix, SymmetricEigen};

/// Eigenvalues `λ` (ascending) of `−(σ²/2 ∂² − b x ∂ + α)` from the unitarily
/// equivalent Schrödinger form `σ²/2 ψ'' − (b²x²/2σ² − b/2)ψ + αψ`,
/// discretized by central differences with Dirichlet walls at `±half_width`.
fn finite_difference_spectrum(b: f64, sigma2: f64, alpha: impl Fn(f64) -> f64, half_width: f64, n: usize) -> Vec<f64> {
    let h = 2.0 * half_width / (n + 1) as f64;
    let kinetic = sigma2 / (2.0 * h * h);
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let x = -half_width + (i + 1) as f64 * h;
        let v = b * b * x * x / (2.0 * sigma2) - b / 2.0;
        m[(i, i)] = 2.0 * kinetic + v - alpha(x);
        if i + 1 < n {
            m[(i, i + 1)] = -kinetic;
            m[(i + 1, i)] = -kinetic;
        }
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[test]
fn galerkin_bump_potential_matches_finite_differences() {
    let (b, sigma2) = (0.8, 1.3);
    let alpha = |x: f64| 1.0 + 1.5 * (-x * x).exp();
    let params = OUParams::new(b, sigma2, 1).unwrap();
    let gal = galerkin_spectrum(params, &|x: &[f64]| alpha(x[0]), 40, 5).unwrap();
    let fd = finite_difference_spectrum(b, sigma2, alpha, 9.0, 900);
    for k in 0..5 {
        let diff = (gal.eigenvalue(k) - fd[k]).abs();
        assert!(diff < 2e-3, "level {k}: galerkin {} vs finite differences {}", gal.eigenvalue(k), fd[k]);
    }
    // the bump lowers every level below the unperturbed b·k − 1
    for k in 0..5 {
        assert!(gal.eigenvalue(k) < b * k as f64 - 1.0);
    }
}

#[test]
fn constant_potential_finite_differences_reproduce_ou_levels() {
    // sanity check of the oracle itself
    let fd = finite_difference_spectrum(1.0, 1.0, |_| 0.3, 9.0, 900);
    for (k, l) in fd.iter().take(5).enumerate() {
        assert!((l - (k as f64 - 0.3)).abs() < 2e-3, "{k}: {l}");
    }
}

fn model(beta: f64, pmf: &[f64]) -> ModelSpec {
    ModelSpec::new(OUParams::new(1.0, 1.0, 1).unwrap(), RateFn::Constant(beta), OffspringLaw::Fixed(pmf.to_vec())).unwrap()
}

fn level(m: &ModelSpec, k: usize) -> FunctionExpansion {
    let f = FunctionExpansion::from_eigen_combination(m.basis(), &[(k, 0, 1.0)]).unwrap();
    split(f, m.lambda1(), m.basis()).unwrap()
}

/// `∫ g dμ` for the invariant law `N(0, 1/2)` by the trapezoidal rule.
fn gaussian_mean(g: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi, n) = (-10.0, 10.0, 20_000);
    let h = (hi - lo) / n as f64;
    let density = |x: f64| (-x * x).exp() / std::f64::consts::PI.sqrt();
    (0..=n)
        .map(|i| {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * g(x) * density(x)
        })
        .sum::<f64>()
        * h
}

#[test]
fn small_regime_variance_from_gaussian_integrals() {
    // β = 1, p = (0.2, 0, 0.8): λ_1 = −0.6, λ_2 = 0.4, A = β·E[N(N−1)] = 1.6
    let m = model(1.0, &[0.2, 0.0, 0.8]);
    let phi2 = |x: f64| 2f64.sqrt() * x;
    let (l1, l2, a) = (-0.6, 0.4, 1.6);
    let sq = gaussian_mean(|x| phi2(x).powi(2));
    let oracle = a * sq / (2.0 * l2 - l1) + sq;
    let got = sigma2_small(&m, &level(&m, 1)).unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
}

#[test]
fn critical_and_large_variances_from_gaussian_integrals() {
    let phi2 = |x: f64| 2f64.sqrt() * x;
    let crit = model(2.0, &[0.0, 0.0, 1.0]);
    let oracle = 4.0 * gaussian_mean(|x| phi2(x).powi(2));
    let got = rho2_critical(&crit, &level(&crit, 1)).unwrap();
    assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");

    // β = 4: λ_1 = −4, λ_2 = −3, A = 8. With φ_2² = √2 φ_3 + 1 and
    // T_s φ_3 = e^{2s} φ_3, η²(x) = 8 ∫ e^{−6s}(√2 e^{2s} φ_3(x) + e^{4s}) ds.
    let large = model(4.0, &[0.0, 0.0, 1.0]);
    let phi3 = |x: f64| (2.0 * x * x - 1.0) / 2f64.sqrt();
    for x in [-1.0, 0.0, 0.5, 1.7] {
        let oracle = 8.0 * (2f64.sqrt() * phi3(x) / 4.0 + 0.5);
        let got = eta2_large(&large, &level(&large, 1), &[x]).unwrap();
        assert!((got - oracle).abs() < 1e-9, "x = {x}: {got} vs {oracle}");
    }
    // f = φ_1 has no f_(s) part beyond itself: β² = A⟨φ_1³⟩/(−λ_1) − ⟨φ_1²⟩ = 8/4 − 1
    let got = beta2_large(&large, &level(&large, 0)).unwrap();
    assert!((got - 1.0).abs() < 1e-9, "{got}");
}

#[test]
fn yule_population_second_moment() {
    // N_t geometric with parameter e^{−βt}: E N_t² = 2e^{2βt} − e^{βt}
    let m = model(2.0, &[0.0, 0.0, 1.0]);
    let one = level(&m, 0);
    for t in [0.25, 1.0, 1.5] {
        let r = second_moment(&m, &one, t, &[0.3], 200).unwrap();
        let g = (2.0 * t).exp();
        let exact = 2.0 * g * g - g;
        assert!((r.second_moment - exact).abs() < 1e-8 * exact, "t = {t}: {} vs {exact}", r.second_moment);
        assert!((r.variance - (g * g - g)).abs() < 1e-8 * exact);
    }
}

#[test]
fn vanishing_branching_variance_gives_tt_of_square() {
    // with A ≡ 0 the second moment collapses to T_t(f²)(x) = e^{−λ_1 t} E f(ξ_t)²
    let m = model(1.0, &[0.2, 0.0, 0.8]);
    let k = MomentKernel::new(m.basis(), &|_: &[f64]| 0.0).unwrap();
    let f = level(&m, 1);
    let (t, x): (f64, f64) = (0.8, 0.6);
    // ξ_t | ξ_0 = x is N(x e^{−t}, (1 − e^{−2t})/2)
    let mean = x * (-t).exp();
    let var = (1.0 - (-2.0 * t).exp()) / 2.0;
    let oracle = (0.6 * t).exp() * 2.0 * (mean * mean + var);
    let r = k.second_moment(&f, t, &[x], 200).unwrap();
    assert!((r.second_moment - oracle).abs() < 1e-10, "{} vs {oracle}", r.second_moment);
}
