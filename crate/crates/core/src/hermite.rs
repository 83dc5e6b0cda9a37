//! Tensor Hermite polynomials orthonormal in `L²(μ)` for a centred Gaussian
//! `μ` with per-coordinate standard deviation `scale`.

/// `ψ_0(z), …, ψ_max(z)` with `ψ_n = He_n / √n!` (probabilists' convention),
/// orthonormal against the standard normal density.
pub fn normalized_hermite(z: f64, max_degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if max_degree == 0 {
        return;
    }
    out.push(z);
    for n in 1..max_degree {
        let nf = n as f64;
        let next = (z * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
        out.push(next);
    }
}

/// Multi-indices of total degree `≤ max_degree`, ordered by total degree
/// and then lexicographically (descending in the first coordinate).
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    scale: f64,
    dim: usize,
    max_degree: usize,
    indices: Vec<Vec<usize>>,
}

impl HermiteBasis {
    pub fn new(scale: f64, dim: usize, max_degree: usize) -> Self {
        let mut indices = Vec::new();
        for degree in 0..=max_degree {
            push_compositions(degree, dim, &mut Vec::with_capacity(dim), &mut indices);
        }
        Self { scale, dim, max_degree, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_degree(&self) -> usize {
        self.max_degree
    }

    pub fn index(&self, i: usize) -> &[usize] {
        &self.indices[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.indices[i].iter().sum()
    }

    /// Position of the multi-index in the ordering, if present.
    pub fn position(&self, multi: &[usize]) -> Option<usize> {
        self.indices.iter().position(|m| m == multi)
    }

    /// All basis functions at `x`.
    pub fn eval_all(&self, x: &[f64]) -> Vec<f64> {
        let tables = self.tables(x, self.max_degree);
        self.indices
            .iter()
            .map(|m| m.iter().enumerate().map(|(r, &n)| tables[r][n]).product())
            .collect()
    }

    /// `Σ c_i ψ_i(x)` over a sparse coefficient list.
    pub fn eval_sparse(&self, coeffs: &[(usize, f64)], x: &[f64]) -> f64 {
        let top = coeffs.iter().map(|&(i, _)| self.degree(i)).max().unwrap_or(0);
        let tables = self.tables(x, top);
        coeffs
            .iter()
            .map(|&(i, c)| {
                c * self.indices[i]
                    .iter()
                    .enumerate()
                    .map(|(r, &n)| tables[r][n])
                    .product::<f64>()
            })
            .sum()
    }

    fn tables(&self, x: &[f64], top: usize) -> Vec<Vec<f64>> {
        debug_assert_eq!(x.len(), self.dim);
        x.iter()
            .map(|&xi| {
                let mut t = Vec::with_capacity(top + 1);
                normalized_hermite(xi / self.scale, top, &mut t);
                t
            })
            .collect()
    }
}

fn push_compositions(remaining: usize, slots: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if slots == 1 {
        prefix.push(remaining);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=remaining).rev() {
        prefix.push(first);
        push_compositions(remaining - first, slots - 1, prefix, out);
        prefix.pop();
    }
}
