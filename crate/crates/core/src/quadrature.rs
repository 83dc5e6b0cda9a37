//! Gauss–Hermite rules for the Gaussian invariant measure and an adaptive
//! Gauss–Kronrod integrator for the time integrals.

use crate::error::{Error, Result};

/// Physicists' Gauss–Hermite rule: `∫ e^{-y²} g(y) dy ≈ Σ w_i g(y_i)`.
///
/// Nodes come back in descending order. Newton iteration on the
/// orthonormal Hermite recurrence, with the classical asymptotic starting
/// guesses for the largest roots.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    const MAXIT: usize = 100;

    assert!(n >= 1, "Gauss–Hermite order must be positive");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..MAXIT {
            let (p1, p2) = hermite_pair(n, z, PIM4);
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        // one more evaluation at the converged root for the weight
        let (_, p2) = hermite_pair(n, z, PIM4);
        pp = if p2 != 0.0 { (2.0 * nf).sqrt() * p2 } else { pp };
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

// Orthonormal physicists' Hermite values (h_n, h_{n-1}) at z.
fn hermite_pair(n: usize, z: f64, h0: f64) -> (f64, f64) {
    let mut p1 = h0;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, p2)
}

/// Tensor-product quadrature for the centred Gaussian with per-coordinate
/// variance `variance` in dimension `dim`. Weights sum to one.
#[derive(Debug, Clone)]
pub struct GaussianGrid {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianGrid {
    pub fn new(order: usize, variance: f64, dim: usize) -> Result<Self> {
        if order == 0 {
            return Err(crate::error::invalid("quad_order", "must be at least 1"));
        }
        if dim == 0 {
            return Err(crate::error::invalid("d", "must be at least 1"));
        }
        let total = order
            .checked_pow(dim as u32)
            .filter(|&t| t <= 50_000_000)
            .ok_or_else(|| crate::error::invalid("quad_order", "tensor grid too large"))?;
        let (y, w) = gauss_hermite(order);
        let scale = (2.0 * variance).sqrt();
        let norm = std::f64::consts::PI.sqrt();
        let x1: Vec<f64> = y.iter().map(|&yi| scale * yi).collect();
        let w1: Vec<f64> = w.iter().map(|&wi| wi / norm).collect();

        let mut nodes = Vec::with_capacity(total * dim);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut wt = 1.0;
            for &i in &idx {
                nodes.push(x1[i]);
                wt *= w1[i];
            }
            weights.push(wt);
            for slot in idx.iter_mut().rev() {
                *slot += 1;
                if *slot < order {
                    break;
                }
                *slot = 0;
            }
        }
        Ok(Self { dim, nodes, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> {
        self.nodes.chunks_exact(self.dim)
    }

    /// Samples `f` at every node, rejecting non-finite values.
    pub fn sample<F: Fn(&[f64]) -> f64 + ?Sized>(&self, f: &F) -> Result<Vec<f64>> {
        self.nodes()
            .map(|x| {
                let v = f(x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteSample { node: x.to_vec(), value: v })
                }
            })
            .collect()
    }

    /// `Σ w_i a_i b_i`.
    pub fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a)
            .zip(b)
            .map(|((w, x), y)| w * x * y)
            .sum()
    }

    /// `Σ w_i a_i b_i c_i`.
    pub fn dot3(&self, a: &[f64], b: &[f64], c: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a)
            .zip(b)
            .zip(c)
            .map(|(((w, x), y), z)| w * x * y * z)
            .sum()
    }
}

// 15-point Kronrod abscissae and weights with the embedded 7-point Gauss rule.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = h * XGK[j];
        let s = f(c - dx) + f(c + dx);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

/// Adaptive Gauss–Kronrod on `[a, b]`, bisecting the worst panel until the
/// summed error estimate drops below `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<Integral> {
    if a == b {
        return Ok(Integral { value: 0.0, error: 0.0, panels: 0 });
    }
    let (v, e) = gk15(&mut f, a, b);
    let mut panels = vec![(a, b, v, e)];
    let mut previous = v;
    loop {
        let value: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= abs_tol.max(rel_tol * value.abs()) {
            return Ok(Integral { value, error, panels: panels.len() });
        }
        if panels.len() >= max_panels {
            return Err(Error::QuadratureNonConvergence {
                panels: panels.len(),
                previous,
                last: value,
            });
        }
        previous = value;
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&mut f, lo, mid);
        let (v2, e2) = gk15(&mut f, mid, hi);
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
}

/// Integral over `[a, ∞)` of an integrand known to decay at least like
/// `e^{-decay·s}`. Panels of width `1/decay` are added until the bound on the
/// remaining tail drops below `1e-12` of the accumulated value.
pub fn integrate_tail<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    decay: f64,
    rel_tol: f64,
    max_panels: usize,
) -> Result<Integral> {
    if !(decay > 0.0) {
        return Err(crate::error::invalid("decay", "tail integral needs a positive decay rate"));
    }
    let width = 1.0 / decay;
    let mut total = 0.0;
    let mut error = 0.0;
    let mut panels = 0;
    let mut lo = a;
    for _ in 0..10_000 {
        let hi = lo + width;
        let part = integrate(&mut f, lo, hi, 1e-300, rel_tol, max_panels)?;
        total += part.value;
        error += part.error;
        panels += part.panels;
        let tail_bound = f(hi).abs() / decay;
        lo = hi;
        if tail_bound <= 1e-12 * total.abs() || (total == 0.0 && tail_bound == 0.0) {
            return Ok(Integral { value: total, error: error + tail_bound, panels });
        }
    }
    Err(Error::QuadratureNonConvergence { panels, previous: total, last: total })
}
