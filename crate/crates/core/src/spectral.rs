//! Spectrum of the mean-semigroup generator `L + α` for the OU motion, and
//! expansion of test functions in its eigenbasis.
//!
//! Eigenvalues are stored negated, so the operator has eigenvalues
//! `-λ_1 > -λ_2 > …` and `T_t φ = e^{-λ_k t} φ` on level `k`. Levels and the
//! functions inside a level are indexed from zero: level `0` is the
//! principal eigenvalue `λ_1` with the positive eigenfunction `φ_1`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hermite::HermiteBasis;
use crate::quadrature::GaussianGrid;

/// Two eigenvalues belong to the same distinct level when they differ by at
/// most this fraction of `max(1, |λ|)`.
pub const CLUSTER_TOLERANCE: f64 = 1e-6;
/// Relative tolerance for the critical test `2λ_k = λ_1`.
pub const CRITICAL_TOLERANCE: f64 = 1e-9;
/// Default zero threshold for `γ(f)`, as a fraction of `‖f‖₂`.
pub const ZERO_THRESHOLD_FRACTION: f64 = 1e-9;
/// Expansion residuals above this fraction of `‖f‖₂` carry a warning.
pub const TRUNCATION_WARNING_FRACTION: f64 = 1e-6;
/// Gauss–Hermite nodes per dimension in one dimension.
pub const DEFAULT_QUAD_ORDER: usize = 128;
/// Extra Hermite degrees the Galerkin truncation must carry beyond `K_max`.
pub const GALERKIN_PADDING: usize = 2;

/// Parameters of the OU motion `L = ½σ²Δ − b x·∇` on `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OUParams {
    b: f64,
    sigma2: f64,
    d: usize,
}

impl OUParams {
    pub fn new(b: f64, sigma2: f64, d: usize) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(invalid("b", format!("drift must be positive and finite, got {b}")));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(invalid("sigma2", format!("diffusion must be positive and finite, got {sigma2}")));
        }
        if d == 0 {
            return Err(invalid("d", "dimension must be at least 1"));
        }
        Ok(Self { b, sigma2, d })
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Per-coordinate variance `σ²/(2b)` of the invariant law.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma2 / (2.0 * self.b)
    }

    /// Invariant density `μ(x) = (b/(πσ²))^{d/2} exp(−b‖x‖²/σ²)`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        (self.b / (std::f64::consts::PI * self.sigma2)).powf(self.d as f64 / 2.0)
            * (-self.b * r2 / self.sigma2).exp()
    }

    /// Coordinatewise variance of the transition law after time `dt`.
    pub fn transition_variance(&self, dt: f64) -> f64 {
        self.sigma2 * (-(-2.0 * self.b * dt).exp_m1()) / (2.0 * self.b)
    }

    fn default_quad_order(&self, max_degree: usize) -> usize {
        if self.d == 1 {
            DEFAULT_QUAD_ORDER
        } else {
            (2 * max_degree + 16).clamp(24, DEFAULT_QUAD_ORDER)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumSource {
    ClosedForm,
    Galerkin,
}

impl fmt::Display for SpectrumSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpectrumSource::ClosedForm => "closed_form",
            SpectrumSource::Galerkin => "galerkin",
        })
    }
}

/// Position of a level relative to the principal eigenvalue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelClass {
    /// `2λ_k < λ_1`: contributes to `f_(s)`.
    Small,
    /// `2λ_k = λ_1`: contributes to `f_(c)`.
    Critical,
    /// `2λ_k > λ_1`: contributes to `f_(l)`.
    Large,
}

pub fn classify_level(lambda_k: f64, lambda1: f64) -> LevelClass {
    let gap = 2.0 * lambda_k - lambda1;
    if gap.abs() <= CRITICAL_TOLERANCE * lambda1.abs().max(1.0) {
        LevelClass::Critical
    } else if gap < 0.0 {
        LevelClass::Small
    } else {
        LevelClass::Large
    }
}

#[derive(Debug, Clone)]
pub struct Eigenfunction {
    coeffs: Vec<f64>,
    sparse: Vec<(usize, f64)>,
    nodes: Vec<f64>,
}

impl Eigenfunction {
    /// Coefficients over the orthonormal Hermite basis.
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    /// Values at the quadrature nodes of the owning basis.
    pub fn node_values(&self) -> &[f64] {
        &self.nodes
    }
}

#[derive(Debug)]
struct Level {
    eigenvalue: f64,
    functions: Vec<Eigenfunction>,
    residual: f64,
}

#[derive(Debug)]
struct Inner {
    params: OUParams,
    hermite: HermiteBasis,
    grid: GaussianGrid,
    levels: Vec<Level>,
    source: SpectrumSource,
}

/// Distinct eigenvalues with multiplicities and `μ`-orthonormal
/// eigenfunctions. Cheap to clone.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    inner: Arc<Inner>,
}

impl SpectralBasis {
    pub fn params(&self) -> &OUParams {
        &self.inner.params
    }

    pub fn source(&self) -> SpectrumSource {
        self.inner.source
    }

    /// Number of Hermite functions in the truncation.
    pub fn basis_size(&self) -> usize {
        self.inner.hermite.len()
    }

    pub fn hermite(&self) -> &HermiteBasis {
        &self.inner.hermite
    }

    pub fn grid(&self) -> &GaussianGrid {
        &self.inner.grid
    }

    pub fn num_levels(&self) -> usize {
        self.inner.levels.len()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.inner.levels.iter().map(|l| l.eigenvalue).collect()
    }

    pub fn eigenvalue(&self, level: usize) -> f64 {
        self.inner.levels[level].eigenvalue
    }

    pub fn lambda1(&self) -> f64 {
        self.inner.levels[0].eigenvalue
    }

    pub fn multiplicities(&self) -> Vec<usize> {
        self.inner.levels.iter().map(|l| l.functions.len()).collect()
    }

    pub fn multiplicity(&self, level: usize) -> usize {
        self.inner.levels[level].functions.len()
    }

    /// Largest `‖(L_N − λ)v‖` over the eigenvectors of each level (zero for
    /// the closed form).
    pub fn eigen_residuals(&self) -> Vec<f64> {
        self.inner.levels.iter().map(|l| l.residual).collect()
    }

    pub fn level_class(&self, level: usize) -> LevelClass {
        classify_level(self.eigenvalue(level), self.lambda1())
    }

    pub fn eigenfunction(&self, level: usize, index: usize) -> Result<&Eigenfunction> {
        self.inner
            .levels
            .get(level)
            .and_then(|l| l.functions.get(index))
            .ok_or(Error::OutOfBasis { level, index })
    }

    /// `φ_index^{(level)}(x)`. Panics when the pair is outside the basis.
    pub fn eval(&self, level: usize, index: usize, x: &[f64]) -> f64 {
        let ef = &self.inner.levels[level].functions[index];
        self.inner.hermite.eval_sparse(&ef.sparse, x)
    }

    /// `Σ_k Σ_j c[k][j] φ_j^{(k)}(x)`, with each level weighted by `weight(k)`.
    pub fn eval_combination(&self, coeffs: &[Vec<f64>], weight: impl Fn(usize) -> f64, x: &[f64]) -> f64 {
        self.inner.hermite.eval_sparse(&self.hermite_coefficients(coeffs, weight), x)
    }

    /// Nonzero Hermite-basis coefficients of `Σ_k weight(k) Σ_j c_j^k φ_j^{(k)}`,
    /// ready for repeated `HermiteBasis::eval_sparse` calls.
    pub fn hermite_coefficients(&self, coeffs: &[Vec<f64>], weight: impl Fn(usize) -> f64) -> Vec<(usize, f64)> {
        let mut acc = vec![0.0; self.basis_size()];
        for (k, level) in coeffs.iter().enumerate() {
            let wk = weight(k);
            for (j, &c) in level.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for &(i, v) in &self.inner.levels[k].functions[j].sparse {
                    acc[i] += wk * c * v;
                }
            }
        }
        acc.into_iter().enumerate().filter(|&(_, v)| v != 0.0).collect()
    }

    /// `⟨h, φ_j^{(k)}⟩` for every level and index, from node values of `h`.
    pub fn project(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let grid = &self.inner.grid;
        self.inner
            .levels
            .iter()
            .map(|l| l.functions.iter().map(|ef| grid.dot(values, &ef.nodes)).collect())
            .collect()
    }

    /// Node values of `Σ_k weight(k) Σ_j c[k][j] φ_j^{(k)}`.
    pub fn reconstruct_nodes(&self, coeffs: &[Vec<f64>], weight: impl Fn(usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.inner.grid.len()];
        for (k, level) in coeffs.iter().enumerate() {
            let wk = weight(k);
            for (j, &c) in level.iter().enumerate() {
                if c == 0.0 || wk == 0.0 {
                    continue;
                }
                let s = wk * c;
                for (o, v) in out.iter_mut().zip(&self.inner.levels[k].functions[j].nodes) {
                    *o += s * v;
                }
            }
        }
        out
    }

    /// Node values of `φ_1`.
    pub fn phi1_nodes(&self) -> &[f64] {
        &self.inner.levels[0].functions[0].nodes
    }

    /// Largest deviation of the quadrature Gram matrix of all stored
    /// eigenfunctions from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let all: Vec<&Eigenfunction> = self.inner.levels.iter().flat_map(|l| l.functions.iter()).collect();
        let mut worst = 0.0f64;
        for (a, fa) in all.iter().enumerate() {
            for (b, fb) in all.iter().enumerate().skip(a) {
                let g = self.inner.grid.dot(&fa.nodes, &fb.nodes);
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((g - target).abs());
            }
        }
        worst
    }

    fn build(
        params: OUParams,
        hermite: HermiteBasis,
        grid: GaussianGrid,
        raw: Vec<(f64, Vec<Vec<f64>>, f64)>,
        source: SpectrumSource,
    ) -> Self {
        let basis_nodes: Vec<Vec<f64>> = grid.nodes().map(|x| hermite.eval_all(x)).collect();
        let levels = raw
            .into_iter()
            .map(|(eigenvalue, vectors, residual)| Level {
                eigenvalue,
                residual,
                functions: vectors
                    .into_iter()
                    .map(|coeffs| {
                        let sparse: Vec<(usize, f64)> = coeffs
                            .iter()
                            .enumerate()
                            .filter(|(_, c)| **c != 0.0)
                            .map(|(i, c)| (i, *c))
                            .collect();
                        let nodes = basis_nodes
                            .iter()
                            .map(|psi| sparse.iter().map(|&(i, c)| c * psi[i]).sum())
                            .collect();
                        Eigenfunction { coeffs, sparse, nodes }
                    })
                    .collect(),
            })
            .collect();
        Self { inner: Arc::new(Inner { params, hermite, grid, levels, source }) }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of multi-indices in `d` variables of total degree `degree`.
pub fn level_multiplicity(degree: usize, d: usize) -> usize {
    binomial(degree + d - 1, d - 1)
}

/// Exact spectrum for a constant potential `α`: `λ_k = b(k−1) − α` with the
/// Hermite tensor products of total degree `k−1` as eigenfunctions.
pub fn closed_form_spectrum(params: OUParams, alpha: f64, k_max: usize) -> Result<SpectralBasis> {
    closed_form_spectrum_with_order(params, alpha, k_max, None)
}

pub fn closed_form_spectrum_with_order(
    params: OUParams,
    alpha: f64,
    k_max: usize,
    quad_order: Option<usize>,
) -> Result<SpectralBasis> {
    if k_max < 1 {
        return Err(invalid("k_max", "at least one level is required"));
    }
    if !alpha.is_finite() {
        return Err(invalid("alpha", format!("constant potential must be finite, got {alpha}")));
    }
    let max_degree = k_max - 1;
    let hermite = HermiteBasis::new(params.stationary_variance().sqrt(), params.d(), max_degree);
    let order = quad_order.unwrap_or_else(|| params.default_quad_order(max_degree));
    let grid = GaussianGrid::new(order, params.stationary_variance(), params.d())?;
    let m = hermite.len();
    let mut raw = Vec::with_capacity(k_max);
    for degree in 0..=max_degree {
        let vectors = (0..m)
            .filter(|&i| hermite.degree(i) == degree)
            .map(|i| {
                let mut v = vec![0.0; m];
                v[i] = 1.0;
                v
            })
            .collect();
        raw.push((params.b() * degree as f64 - alpha, vectors, 0.0));
    }
    Ok(SpectralBasis::build(params, hermite, grid, raw, SpectrumSource::ClosedForm))
}

/// Galerkin approximation of the spectrum of `L + α` in the Hermite basis of
/// total degree `< n`. Returns the `k_max` levels with the smallest `λ`.
pub fn galerkin_spectrum<A>(params: OUParams, alpha: &A, n: usize, k_max: usize) -> Result<SpectralBasis>
where
    A: Fn(&[f64]) -> f64 + ?Sized,
{
    galerkin_spectrum_with_order(params, alpha, n, k_max, None)
}

pub fn galerkin_spectrum_with_order<A>(
    params: OUParams,
    alpha: &A,
    n: usize,
    k_max: usize,
    quad_order: Option<usize>,
) -> Result<SpectralBasis>
where
    A: Fn(&[f64]) -> f64 + ?Sized,
{
    if k_max < 1 {
        return Err(invalid("k_max", "at least one level is required"));
    }
    if n < k_max + GALERKIN_PADDING {
        return Err(invalid(
            "n",
            format!("basis size {n} must be at least k_max + {GALERKIN_PADDING} = {}", k_max + GALERKIN_PADDING),
        ));
    }
    let max_degree = n - 1;
    let hermite = HermiteBasis::new(params.stationary_variance().sqrt(), params.d(), max_degree);
    let order = quad_order.unwrap_or_else(|| params.default_quad_order(max_degree));
    let grid = GaussianGrid::new(order, params.stationary_variance(), params.d())?;

    let q = grid.len();
    let m = hermite.len();
    // Ψ: m × q basis values; Ψ_w = Ψ·diag(w α)
    let mut psi = DMatrix::<f64>::zeros(m, q);
    let mut psi_w = DMatrix::<f64>::zeros(m, q);
    for (col, x) in grid.nodes().enumerate() {
        let a = alpha(x);
        if !a.is_finite() || a.abs() > 1e12 {
            return Err(Error::UnboundedPotential { node: x.to_vec(), value: a });
        }
        let w = grid.weights()[col];
        for (row, v) in hermite.eval_all(x).into_iter().enumerate() {
            psi[(row, col)] = v;
            psi_w[(row, col)] = v * w * a;
        }
    }
    let mut op = &psi_w * psi.transpose();
    for i in 0..m {
        op[(i, i)] -= params.b() * hermite.degree(i) as f64;
    }
    // symmetrize round-off
    let op = (&op + op.transpose()) * 0.5;

    let eig = SymmetricEigen::new(op.clone());
    // λ = −(operator eigenvalue); ascending λ
    let mut order_idx: Vec<usize> = (0..m).collect();
    order_idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambdas: Vec<f64> = order_idx.iter().map(|&i| -eig.eigenvalues[i]).collect();

    let clusters = cluster(&lambdas)?;
    if clusters.len() <= k_max {
        return Err(Error::InsufficientBasis { available: clusters.len().saturating_sub(1), requested: k_max });
    }
    let boundary_gap = lambdas[clusters[k_max].0] - lambdas[clusters[k_max - 1].1 - 1];
    let scale = lambdas[clusters[k_max].0].abs().max(1.0);
    if boundary_gap <= 10.0 * CLUSTER_TOLERANCE * scale {
        return Err(Error::Clustering(format!(
            "gap {boundary_gap:e} between level {k_max} and the next eigenvalue is within the cluster tolerance"
        )));
    }

    let mut raw = Vec::with_capacity(k_max);
    for (level, &(start, end)) in clusters.iter().take(k_max).enumerate() {
        let mean = lambdas[start..end].iter().sum::<f64>() / (end - start) as f64;
        let mut residual = 0.0f64;
        let mut vectors = Vec::with_capacity(end - start);
        for &col in &order_idx[start..end] {
            let v: DVector<f64> = eig.eigenvectors.column(col).into_owned();
            let r = (&op * &v - &v * eig.eigenvalues[col]).norm();
            residual = residual.max(r);
            let mut coeffs: Vec<f64> = v.iter().copied().collect();
            let sign = if level == 0 {
                // ⟨φ_1, 1⟩ is the constant-mode coefficient
                coeffs[0].signum()
            } else {
                let pivot = coeffs.iter().copied().fold(0.0f64, |acc, c| if c.abs() > acc.abs() { c } else { acc });
                pivot.signum()
            };
            if sign < 0.0 {
                coeffs.iter_mut().for_each(|c| *c = -*c);
            }
            vectors.push(coeffs);
        }
        raw.push((mean, vectors, residual));
    }
    if raw[0].1.len() != 1 {
        return Err(Error::Clustering(format!(
            "principal eigenvalue has multiplicity {}, expected a simple level",
            raw[0].1.len()
        )));
    }
    Ok(SpectralBasis::build(params, hermite, grid, raw, SpectrumSource::Galerkin))
}

// Half-open index ranges of ascending `values` grouped by the cluster tolerance.
fn cluster(values: &[f64]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=values.len() {
        let split = i == values.len()
            || (values[i] - values[i - 1]).abs() > CLUSTER_TOLERANCE * values[i - 1].abs().max(1.0);
        if split {
            let spread = values[i - 1] - values[start];
            if spread > 10.0 * CLUSTER_TOLERANCE * values[start].abs().max(1.0) {
                return Err(Error::Clustering(format!(
                    "cluster [{}, {}] chains across a spread of {spread:e}",
                    values[start],
                    values[i - 1]
                )));
            }
            out.push((start, i));
            start = i;
        }
    }
    Ok(out)
}

/// Largest principal angle (radians) between the eigenspaces of `level` in
/// two bases over the same OU parameters.
pub fn max_principal_angle(a: &SpectralBasis, b: &SpectralBasis, level: usize) -> Result<f64> {
    let ha = a.hermite();
    let hb = b.hermite();
    let big = if ha.len() >= hb.len() { ha } else { hb };
    let lift = |basis: &SpectralBasis, h: &HermiteBasis| -> Result<Vec<DVector<f64>>> {
        (0..basis.multiplicity(level))
            .map(|j| {
                let ef = basis.eigenfunction(level, j)?;
                let mut v = DVector::zeros(big.len());
                for (i, &c) in ef.coefficients().iter().enumerate() {
                    let pos = big
                        .position(h.index(i))
                        .ok_or_else(|| invalid("basis", "Hermite truncations are not nested"))?;
                    v[pos] = c;
                }
                Ok(v)
            })
            .collect()
    };
    let u = lift(a, ha)?;
    let v = lift(b, hb)?;
    if u.len() != v.len() {
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    // sin θ_max = ‖(I − UUᵀ)V‖₂
    let mut r = DMatrix::zeros(big.len(), v.len());
    for (col, vj) in v.iter().enumerate() {
        let mut res = vj.clone();
        for ui in &u {
            res -= ui * ui.dot(vj);
        }
        r.set_column(col, &res);
    }
    let sigma = r.singular_values().iter().copied().fold(0.0f64, f64::max);
    Ok(sigma.min(1.0).asin())
}

/// `⟨f, g⟩` in `L²(μ)` by Gauss–Hermite quadrature with `quad_order` nodes
/// per dimension.
pub fn inner_product<F, G>(f: &F, g: &G, params: &OUParams, quad_order: usize) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
    G: Fn(&[f64]) -> f64 + ?Sized,
{
    let grid = GaussianGrid::new(quad_order, params.stationary_variance(), params.d())?;
    let fv = grid.sample(f)?;
    let gv = grid.sample(g)?;
    Ok(grid.dot(&fv, &gv))
}

/// The projected pieces of a function.
#[derive(Debug, Clone)]
pub struct Split {
    /// `f_(s)`: levels with `2λ_k < λ_1`.
    pub small: FunctionExpansion,
    /// `f_(c)`: levels with `2λ_k = λ_1`.
    pub critical: FunctionExpansion,
    /// `f_(l) = f − f_(s) − f_(c)`, including the truncation residual.
    pub large: FunctionExpansion,
    /// `f_1`: the level-`γ(f)` slice.
    pub leading: FunctionExpansion,
}

/// A test function expressed through its coefficients `a_j^k = ⟨f, φ_j^{(k)}⟩`.
#[derive(Debug, Clone)]
pub struct FunctionExpansion {
    basis: SpectralBasis,
    coeffs: Vec<Vec<f64>>,
    values: Vec<f64>,
    norm: f64,
    residual: f64,
    gamma: Option<usize>,
    zero_threshold: f64,
    warning: Option<String>,
    split: Option<Box<Split>>,
}

impl FunctionExpansion {
    fn from_parts(basis: &SpectralBasis, coeffs: Vec<Vec<f64>>, values: Vec<f64>, zero_threshold: Option<f64>) -> Self {
        let grid = basis.grid();
        let norm = grid.dot(&values, &values).sqrt();
        let recon = basis.reconstruct_nodes(&coeffs, |_| 1.0);
        let diff: Vec<f64> = values.iter().zip(&recon).map(|(a, b)| a - b).collect();
        let residual = grid.dot(&diff, &diff).sqrt();
        let zero_threshold = zero_threshold.unwrap_or(ZERO_THRESHOLD_FRACTION * norm);
        let gamma = coeffs
            .iter()
            .position(|level| level.iter().any(|a| a.abs() > zero_threshold));
        let warning = (residual > TRUNCATION_WARNING_FRACTION * norm).then(|| {
            format!(
                "truncation residual {residual:e} exceeds {TRUNCATION_WARNING_FRACTION:e} of the norm {norm:e} at {} levels",
                coeffs.len()
            )
        });
        Self { basis: basis.clone(), coeffs, values, norm, residual, gamma, zero_threshold, warning, split: None }
    }

    /// Expansion of an explicit combination `Σ c·φ_j^{(k)}` given as
    /// `(level, index, c)` triples.
    pub fn from_eigen_combination(basis: &SpectralBasis, terms: &[(usize, usize, f64)]) -> Result<Self> {
        let mut coeffs: Vec<Vec<f64>> = (0..basis.num_levels()).map(|k| vec![0.0; basis.multiplicity(k)]).collect();
        for &(k, j, c) in terms {
            basis.eigenfunction(k, j)?;
            coeffs[k][j] += c;
        }
        let values = basis.reconstruct_nodes(&coeffs, |_| 1.0);
        Ok(Self::from_parts(basis, coeffs, values, None))
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    /// `coeffs()[k][j] = a_j^k`.
    pub fn coeffs(&self) -> &[Vec<f64>] {
        &self.coeffs
    }

    pub fn coeff(&self, level: usize, index: usize) -> f64 {
        self.coeffs[level][index]
    }

    /// Values of `f` at the basis quadrature nodes.
    pub fn node_values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// `‖f − Σ a φ‖₂` over the stored levels.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Level index of `γ(f)` (zero-based); `None` for the zero function.
    pub fn gamma(&self) -> Option<usize> {
        self.gamma
    }

    pub fn zero_threshold(&self) -> f64 {
        self.zero_threshold
    }

    pub fn truncation_warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    pub fn split_parts(&self) -> Option<&Split> {
        self.split.as_deref()
    }

    pub fn is_zero(&self) -> bool {
        self.gamma.is_none() && self.norm <= self.zero_threshold.max(f64::MIN_POSITIVE)
    }

    /// Reconstruction `Σ a_j^k φ_j^{(k)}(x)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.basis.eval_combination(&self.coeffs, |_| 1.0, x)
    }

    /// `T_t f(x)` over the truncated expansion.
    pub fn eval_semigroup(&self, t: f64, x: &[f64]) -> f64 {
        let basis = &self.basis;
        self.basis.eval_combination(&self.coeffs, |k| (-basis.eigenvalue(k) * t).exp(), x)
    }

    /// `c·f`, keeping the split when present.
    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.coeffs.iter_mut().flatten().for_each(|a| *a *= c);
        out.values.iter_mut().for_each(|v| *v *= c);
        out.norm *= c.abs();
        out.residual *= c.abs();
        out.zero_threshold *= c.abs();
        out.split = self.split.as_ref().map(|s| {
            Box::new(Split {
                small: s.small.scaled(c),
                critical: s.critical.scaled(c),
                large: s.large.scaled(c),
                leading: s.leading.scaled(c),
            })
        });
        out
    }

    fn restricted(&self, keep: impl Fn(usize) -> bool) -> Self {
        let coeffs: Vec<Vec<f64>> = self
            .coeffs
            .iter()
            .enumerate()
            .map(|(k, level)| if keep(k) { level.clone() } else { vec![0.0; level.len()] })
            .collect();
        let values = self.basis.reconstruct_nodes(&coeffs, |_| 1.0);
        Self::from_parts(&self.basis, coeffs, values, Some(self.zero_threshold))
    }
}

/// Coefficients of `f` in `basis`; `zero_threshold` defaults to
/// `1e-9·‖f‖₂`.
pub fn expand<F>(f: &F, basis: &SpectralBasis, zero_threshold: Option<f64>) -> Result<FunctionExpansion>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let values = basis.grid().sample(f)?;
    let coeffs = basis.project(&values);
    Ok(FunctionExpansion::from_parts(basis, coeffs, values, zero_threshold))
}

/// Partitions the levels of `expansion` by the sign of `2λ_k − λ_1`.
pub fn split(expansion: FunctionExpansion, lambda1: f64, basis: &SpectralBasis) -> Result<FunctionExpansion> {
    if (lambda1 - basis.lambda1()).abs() > CRITICAL_TOLERANCE * lambda1.abs().max(1.0) {
        return Err(invalid("lambda1", format!("{lambda1} is not the principal eigenvalue {}", basis.lambda1())));
    }
    if !Arc::ptr_eq(&expansion.basis.inner, &basis.inner) {
        return Err(invalid("basis", "expansion was computed in a different basis"));
    }
    let class = |k: usize| classify_level(basis.eigenvalue(k), lambda1);
    let small = expansion.restricted(|k| class(k) == LevelClass::Small);
    let critical = expansion.restricted(|k| class(k) == LevelClass::Critical);
    let mut large = expansion.restricted(|k| class(k) == LevelClass::Large);
    // f_(l) := f − f_(s) − f_(c) keeps whatever the truncation missed
    large.values = expansion
        .values
        .iter()
        .zip(&small.values)
        .zip(&critical.values)
        .map(|((f, s), c)| f - s - c)
        .collect();
    large = FunctionExpansion::from_parts(basis, large.coeffs, large.values, Some(expansion.zero_threshold));
    let gamma = expansion.gamma;
    let leading = expansion.restricted(|k| Some(k) == gamma);
    let mut out = expansion;
    out.split = Some(Box::new(Split { small, critical, large, leading }));
    Ok(out)
}
