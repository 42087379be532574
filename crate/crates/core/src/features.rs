//! Deterministic finite-dimensional feature maps for the Gaussian kernel
//! `k(x, x′) = exp(−‖x − x′‖² / (2σ²)) = exp(−a‖x − x′‖²)`.
//!
//! Three constructions are provided:
//!
//! * [`TaylorFeatureMap`]: monomial features from the truncated power series
//!   of the cross term `exp(⟨x, x′⟩/σ²)`, one feature per multi-index of total
//!   degree ≤ r.
//! * [`FourierFeatureMap`] built from a [`QuadratureRule`]: cosine/sine pairs
//!   at Gauss–Hermite (grid, subsampled grid, or NNLS-weighted) frequencies.
//! * [`FourierFeatureMap::random`]: classic random Fourier features.
//!
//! All maps expose an analytic Jacobian, which the filter needs for its
//! state-transition linearization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

/// Grid rules larger than this must be subsampled instead of materialized.
pub const MAX_GRID_NODES: usize = 1_000_000;

/// Default moment residual accepted by [`nnls_rule`].
pub const NNLS_RULE_THRESHOLD: f64 = 1e-8;

/// Kernel width `σ` for the kernel parameter `a = 1/(2σ²)`.
pub fn sigma_from_a(a: f64) -> f64 {
    (0.5 / a).sqrt()
}

/// `exp(−a‖x − x′‖²)`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], a: f64) -> f64 {
    assert_eq!(x.len(), y.len(), "gaussian_kernel: dimension mismatch");
    let dist2: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    (-a * dist2).exp()
}

/// Taylor truncation bound `(‖x‖‖x′‖/σ²)^{r+1} / (r+1)!` on `|k − k̃|`.
pub fn taylor_bound(x: &[f64], y: &[f64], sigma: f64, order: u32) -> f64 {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ratio = nx * ny / (sigma * sigma);
    let mut term = 1.0;
    for k in 1..=order + 1 {
        term *= ratio / k as f64;
    }
    term
}

/// Exponents `(α₁, …, α_d)` of one monomial `x^α`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultiIndex(pub Vec<u32>);

impl MultiIndex {
    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `α! = Π αᵢ!`
    pub fn factorial(&self) -> f64 {
        self.0.iter().map(|&a| (1..=a).map(f64::from).product::<f64>()).product()
    }

    /// `x^α`
    pub fn monomial(&self, x: &[f64]) -> f64 {
        self.0.iter().zip(x).map(|(&a, &v)| v.powi(a as i32)).product()
    }

    /// `∂x^α/∂x_m = α_m x^{α−e_m}`, exactly zero when `α_m = 0`.
    pub fn monomial_derivative(&self, x: &[f64], m: usize) -> f64 {
        let am = self.0[m];
        if am == 0 {
            return 0.0;
        }
        let mut prod = f64::from(am);
        for (i, (&a, &v)) in self.0.iter().zip(x).enumerate() {
            let e = if i == m { a - 1 } else { a };
            prod *= v.powi(e as i32);
        }
        prod
    }
}

/// Number of multi-indices in `d` variables with total degree ≤ `r`, i.e. `C(d+r, r)`.
pub fn multi_index_count(d: usize, r: u32) -> Result<usize> {
    let mut acc: u128 = 1;
    // C(d+r, r) = Π_{k=1..r} (d + k) / k, exact at each step.
    for k in 1..=u128::from(r) {
        acc = acc
            .checked_mul(d as u128 + k)
            .ok_or_else(|| Error::Capacity(format!("C({d}+{r},{r}) overflows")))?
            / k;
    }
    let count = usize::try_from(acc).map_err(|_| Error::Capacity(format!("C({d}+{r},{r}) overflows usize")))?;
    let bytes = (count as u128) * (d.max(1) as u128) * 4;
    if bytes > isize::MAX as u128 {
        return Err(Error::Capacity(format!("{count} multi-indices of dimension {d} exceed addressable memory")));
    }
    Ok(count)
}

/// All multi-indices of `d` variables with total degree ≤ `r`.
///
/// Ordered by total degree, then in descending lexicographic order within a
/// degree, so `x₁` precedes `x₂` and `x₁²` precedes `x₁x₂`.
pub fn enumerate_multi_indices(d: usize, r: u32) -> Result<Vec<MultiIndex>> {
    if d == 0 {
        return Err(Error::invalid("multi-index dimension must be at least 1"));
    }
    let count = multi_index_count(d, r)?;
    let mut out = Vec::with_capacity(count);
    let mut current = vec![0u32; d];
    for n in 0..=r {
        compositions(n, 0, &mut current, &mut out);
    }
    debug_assert_eq!(out.len(), count);
    Ok(out)
}

fn compositions(remaining: u32, pos: usize, current: &mut [u32], out: &mut Vec<MultiIndex>) {
    if pos + 1 == current.len() {
        current[pos] = remaining;
        out.push(MultiIndex(current.to_vec()));
        return;
    }
    for first in (0..=remaining).rev() {
        current[pos] = first;
        compositions(remaining - first, pos + 1, current, out);
    }
    current[pos] = 0;
}

/// Truncated Taylor-series features of the Gaussian kernel.
#[derive(Debug, Clone)]
pub struct TaylorFeatureMap {
    dim: usize,
    order: u32,
    sigma: f64,
    indices: Vec<MultiIndex>,
    coeffs: Vec<f64>,
}

impl TaylorFeatureMap {
    pub fn new(dim: usize, order: u32, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("kernel width must be positive, got {sigma}")));
        }
        let indices = enumerate_multi_indices(dim, order)?;
        let coeffs = indices
            .iter()
            .map(|a| 1.0 / (sigma.powi(a.degree() as i32) * a.factorial().sqrt()))
            .collect();
        Ok(TaylorFeatureMap { dim, order, sigma, indices, coeffs })
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn feature_dim(&self) -> usize {
        self.indices.len()
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    /// `c_α = 1/(σ^{|α|} √(α!))`
    pub fn coefficients(&self) -> &[f64] {
        &self.coeffs
    }

    fn envelope(&self, x: &[f64]) -> f64 {
        let n2: f64 = x.iter().map(|v| v * v).sum();
        (-n2 / (2.0 * self.sigma * self.sigma)).exp()
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let g = self.envelope(x);
        Ok(DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().zip(&self.coeffs).map(|(a, c)| g * c * a.monomial(x)),
        ))
    }

    /// `∂φ̃/∂x`, a `D × d` matrix.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let g = self.envelope(x);
        let s2 = self.sigma * self.sigma;
        let mut jac = DMatrix::zeros(self.indices.len(), self.dim);
        for (l, (a, c)) in self.indices.iter().zip(&self.coeffs).enumerate() {
            let feature = g * c * a.monomial(x);
            for m in 0..self.dim {
                jac[(l, m)] = g * c * a.monomial_derivative(x, m) - feature * x[m] / s2;
            }
        }
        Ok(jac)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!("expected input of dimension {}, got {}", self.dim, x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature-map input"));
        }
        Ok(())
    }
}

/// `E[Π ω_l^{r_l}]` under the standard normal measure on `R^d`.
pub fn gaussian_moment(exponents: &[u32]) -> f64 {
    exponents
        .iter()
        .map(|&r| if r % 2 == 1 { 0.0 } else { (1..r).step_by(2).map(f64::from).product::<f64>() })
        .product()
}

/// Frequency nodes with nonnegative weights approximating the standard normal measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub dim: usize,
    /// Polynomial exactness degree, when the rule was constructed to have one.
    pub degree: Option<u32>,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Largest moment error `|Σ a_i ω_i^r − E[ω^r]|` over all `|r| ≤ degree`.
    pub fn moment_residual(&self, degree: u32) -> Result<f64> {
        let indices = enumerate_multi_indices(self.dim, degree)?;
        Ok(indices
            .iter()
            .map(|r| {
                let quad: f64 = self.nodes.iter().zip(&self.weights).map(|(w, a)| a * r.monomial(w)).sum();
                (quad - gaussian_moment(&r.0)).abs()
            })
            .fold(0.0, f64::max))
    }
}

/// One-dimensional `n`-point Gauss–Hermite rule for the standard normal measure.
///
/// Nodes are eigenvalues of the symmetric tridiagonal Jacobi matrix of the
/// probabilists' Hermite recurrence; weights are squared first components of
/// the normalized eigenvectors. Nodes are returned in ascending order.
pub fn hermite_1d(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::invalid("Gauss–Hermite rule needs at least one point"));
    }
    let jacobi = DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { (i.max(j) as f64).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::try_new(jacobi, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::numeric("Jacobi matrix eigen-decomposition did not converge"))?;
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Symmetric measure: snap the centre node and mirror the pairs exactly.
    let half = n / 2;
    for i in 0..half {
        let node = 0.5 * (pairs[n - 1 - i].0 - pairs[i].0);
        let weight = 0.5 * (pairs[n - 1 - i].1 + pairs[i].1);
        pairs[i] = (-node, weight);
        pairs[n - 1 - i] = (node, weight);
    }
    if n % 2 == 1 {
        pairs[half].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.iter().map(|&(node, weight)| (node, weight / total)).unzip())
}

/// Tensor-product Gauss–Hermite grid, kept in factored form.
///
/// The grid can be far too large to materialize (a 3-point rule in 32
/// dimensions has 3³² nodes). Subsampling proportionally to the product
/// weights is the same as drawing each coordinate independently from the
/// one-dimensional rule, which [`HermiteGrid::subsample`] does directly.
#[derive(Debug, Clone)]
pub struct HermiteGrid {
    pub dim: usize,
    pub degree: u32,
    pub nodes_1d: Vec<f64>,
    pub weights_1d: Vec<f64>,
}

impl HermiteGrid {
    /// Grid exact for all monomials of total degree ≤ `degree`, using
    /// `⌈(degree+1)/2⌉` points per axis.
    pub fn new(degree: u32, dim: usize) -> Result<Self> {
        if degree == 0 || dim == 0 {
            return Err(Error::invalid("Gauss–Hermite grid needs degree ≥ 1 and dim ≥ 1"));
        }
        let points = (degree as usize + 2) / 2;
        let (nodes_1d, weights_1d) = hermite_1d(points)?;
        Ok(HermiteGrid { dim, degree, nodes_1d, weights_1d })
    }

    /// Node count of the full grid, `None` if it overflows `usize`.
    pub fn node_count(&self) -> Option<usize> {
        let p = self.nodes_1d.len();
        (0..self.dim).try_fold(1usize, |acc, _| acc.checked_mul(p))
    }

    pub fn materialize(&self, cap: usize) -> Result<QuadratureRule> {
        let count = self
            .node_count()
            .filter(|&c| c <= cap)
            .ok_or_else(|| {
                Error::Capacity(format!(
                    "{}-point grid in {} dimensions exceeds {cap} nodes; subsample instead",
                    self.nodes_1d.len(),
                    self.dim
                ))
            })?;
        let p = self.nodes_1d.len();
        let mut nodes = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut digits = vec![0usize; self.dim];
        for _ in 0..count {
            nodes.push(digits.iter().map(|&k| self.nodes_1d[k]).collect());
            weights.push(digits.iter().map(|&k| self.weights_1d[k]).product());
            // Odometer with the last coordinate fastest.
            for pos in (0..self.dim).rev() {
                digits[pos] += 1;
                if digits[pos] < p {
                    break;
                }
                digits[pos] = 0;
            }
        }
        Ok(QuadratureRule { dim: self.dim, degree: Some(self.degree), nodes, weights })
    }

    /// `count` nodes drawn with replacement proportionally to the grid weights.
    pub fn subsample(&self, count: usize, seed: u64) -> Result<QuadratureRule> {
        if count == 0 {
            return Err(Error::invalid("subsample size must be at least 1"));
        }
        let dist = WeightedIndex::new(&self.weights_1d).map_err(|e| Error::invalid(format!("grid weights: {e}")))?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let nodes = (0..count)
            .map(|_| (0..self.dim).map(|_| self.nodes_1d[dist.sample(&mut rng)]).collect())
            .collect();
        Ok(QuadratureRule { dim: self.dim, degree: None, nodes, weights: vec![1.0 / count as f64; count] })
    }
}

/// Tensor Gauss–Hermite rule exact to total degree `degree` in `dim` dimensions.
pub fn gauss_hermite_rule(degree: u32, dim: usize) -> Result<QuadratureRule> {
    HermiteGrid::new(degree, dim)?.materialize(MAX_GRID_NODES)
}

/// Draws `count` nodes with replacement in proportion to the rule weights.
/// The returned rule has uniform weights `1/count`.
pub fn subsample_rule(rule: &QuadratureRule, count: usize, seed: u64) -> Result<QuadratureRule> {
    if rule.is_empty() {
        return Err(Error::invalid("cannot subsample an empty rule"));
    }
    if count == 0 {
        return Err(Error::invalid("subsample size must be at least 1"));
    }
    let dist = WeightedIndex::new(&rule.weights).map_err(|e| Error::invalid(format!("rule weights: {e}")))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let nodes = (0..count).map(|_| rule.nodes[dist.sample(&mut rng)].clone()).collect();
    Ok(QuadratureRule { dim: rule.dim, degree: None, nodes, weights: vec![1.0 / count as f64; count] })
}

/// `count` frequencies drawn from the standard normal measure on `R^dim`.
pub fn sample_frequencies(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

/// Quadrature rule on the given candidate nodes whose nonnegative weights
/// match all Gaussian moments of total degree ≤ `degree`, found by NNLS.
#[derive(Debug, Clone)]
pub struct NnlsRule {
    pub rule: QuadratureRule,
    /// Largest absolute moment error of the returned weights.
    pub residual: f64,
}

pub fn nnls_rule(candidates: &[Vec<f64>], degree: u32, dim: usize, threshold: f64) -> Result<NnlsRule> {
    if candidates.is_empty() {
        return Err(Error::invalid("nnls_rule needs at least one candidate node"));
    }
    if let Some(bad) = candidates.iter().find(|c| c.len() != dim) {
        return Err(Error::invalid(format!("candidate of dimension {} in a {dim}-dimensional rule", bad.len())));
    }
    let indices = enumerate_multi_indices(dim, degree)?;
    let c = DMatrix::from_fn(indices.len(), candidates.len(), |i, j| indices[i].monomial(&candidates[j]));
    let target = DVector::from_iterator(indices.len(), indices.iter().map(|r| gaussian_moment(&r.0)));
    let sol = numerics::nnls(&c, &target)?;
    let residual = (&c * &sol.x - &target).amax();
    if !(residual <= threshold) {
        return Err(Error::RuleQuality { residual, threshold });
    }
    let rule = QuadratureRule {
        dim,
        degree: Some(degree),
        nodes: candidates.to_vec(),
        weights: sol.x.iter().copied().collect(),
    };
    Ok(NnlsRule { rule, residual })
}

/// How the frequencies of a [`FourierFeatureMap`] were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourierSource {
    Random,
    Quadrature,
}

/// Cosine/sine features `√a_i cos(ω_iᵀx/σ)`, `√a_i sin(ω_iᵀx/σ)`, stored
/// as consecutive pairs per node. Because the pair sums to `a_i`, the
/// approximate kernel satisfies `k̃(x, x) = Σ a_i = 1`.
#[derive(Debug, Clone)]
pub struct FourierFeatureMap {
    dim: usize,
    sigma: f64,
    source: FourierSource,
    seed: Option<u64>,
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    sqrt_weights: Vec<f64>,
}

impl FourierFeatureMap {
    pub fn new(
        dim: usize,
        sigma: f64,
        source: FourierSource,
        seed: Option<u64>,
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!("kernel width must be positive, got {sigma}")));
        }
        if nodes.is_empty() || nodes.len() != weights.len() {
            return Err(Error::invalid("Fourier map needs matching, nonempty node and weight lists"));
        }
        if nodes.iter().any(|n| n.len() != dim) {
            return Err(Error::invalid("Fourier node dimension mismatch"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("Fourier weights must be finite and nonnegative"));
        }
        let sqrt_weights = weights.iter().map(|w| w.sqrt()).collect();
        Ok(FourierFeatureMap { dim, sigma, source, seed, nodes, weights, sqrt_weights })
    }

    /// Random Fourier features with `count` standard-normal frequencies.
    pub fn random(dim: usize, count: usize, sigma: f64, seed: u64) -> Result<Self> {
        let nodes = sample_frequencies(count, dim, seed);
        Self::new(dim, sigma, FourierSource::Random, Some(seed), nodes, vec![1.0 / count as f64; count])
    }

    pub fn from_rule(rule: &QuadratureRule, sigma: f64, seed: Option<u64>) -> Result<Self> {
        Self::new(rule.dim, sigma, FourierSource::Quadrature, seed, rule.nodes.clone(), rule.weights.clone())
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    /// Twice the node count.
    pub fn feature_dim(&self) -> usize {
        2 * self.nodes.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn phase(&self, node: &[f64], x: &[f64]) -> f64 {
        node.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() / self.sigma
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let mut out = DVector::zeros(self.feature_dim());
        for (i, (node, sw)) in self.nodes.iter().zip(&self.sqrt_weights).enumerate() {
            let (s, c) = self.phase(node, x).sin_cos();
            out[2 * i] = sw * c;
            out[2 * i + 1] = sw * s;
        }
        Ok(out)
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut jac = DMatrix::zeros(self.feature_dim(), self.dim);
        for (i, (node, sw)) in self.nodes.iter().zip(&self.sqrt_weights).enumerate() {
            let (s, c) = self.phase(node, x).sin_cos();
            for m in 0..self.dim {
                let dphase = node[m] / self.sigma;
                jac[(2 * i, m)] = -sw * s * dphase;
                jac[(2 * i + 1, m)] = sw * c * dphase;
            }
        }
        Ok(jac)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!("expected input of dimension {}, got {}", self.dim, x.len())));
        }
        Ok(())
    }
}

/// Serializable description of a feature map. Taylor maps are regenerated
/// from their parameters; Fourier maps carry their nodes and weights, so a
/// reloaded map evaluates bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FeatureMapDescriptor {
    Taylor {
        dim: usize,
        order: u32,
        sigma: f64,
    },
    Fourier {
        dim: usize,
        sigma: f64,
        source: FourierSource,
        seed: Option<u64>,
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

/// Any of the explicit feature maps.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    Taylor(TaylorFeatureMap),
    Fourier(FourierFeatureMap),
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMap::Taylor(m) => m.input_dim(),
            FeatureMap::Fourier(m) => m.input_dim(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            FeatureMap::Taylor(m) => m.feature_dim(),
            FeatureMap::Fourier(m) => m.feature_dim(),
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<DVector<f64>> {
        match self {
            FeatureMap::Taylor(m) => m.eval(x),
            FeatureMap::Fourier(m) => m.eval(x),
        }
    }

    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::Taylor(m) => m.jacobian(x),
            FeatureMap::Fourier(m) => m.jacobian(x),
        }
    }

    /// Approximate kernel `⟨φ̃(x), φ̃(y)⟩`.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.eval(x)?.dot(&self.eval(y)?))
    }

    pub fn descriptor(&self) -> FeatureMapDescriptor {
        match self {
            FeatureMap::Taylor(m) => FeatureMapDescriptor::Taylor { dim: m.dim, order: m.order, sigma: m.sigma },
            FeatureMap::Fourier(m) => FeatureMapDescriptor::Fourier {
                dim: m.dim,
                sigma: m.sigma,
                source: m.source,
                seed: m.seed,
                nodes: m.nodes.clone(),
                weights: m.weights.clone(),
            },
        }
    }

    pub fn from_descriptor(desc: &FeatureMapDescriptor) -> Result<Self> {
        match desc {
            FeatureMapDescriptor::Taylor { dim, order, sigma } => {
                Ok(FeatureMap::Taylor(TaylorFeatureMap::new(*dim, *order, *sigma)?))
            }
            FeatureMapDescriptor::Fourier { dim, sigma, source, seed, nodes, weights } => Ok(FeatureMap::Fourier(
                FourierFeatureMap::new(*dim, *sigma, *source, *seed, nodes.clone(), weights.clone())?,
            )),
        }
    }
}

/// Recipe for building a feature map from configuration. Widths are given
/// as the kernel parameter `a = 1/(2σ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureSpec {
    Taylor {
        order: u32,
        a: f64,
    },
    RandomFourier {
        nodes: usize,
        a: f64,
        seed: u64,
    },
    /// Gauss–Hermite features: the full grid when `nodes` is absent,
    /// otherwise `nodes` draws from it.
    GaussHermite {
        degree: u32,
        nodes: Option<usize>,
        a: f64,
        seed: u64,
    },
    Explicit(FeatureMapDescriptor),
}

impl FeatureSpec {
    pub fn build(&self, dim: usize) -> Result<FeatureMap> {
        match self {
            FeatureSpec::Taylor { order, a } => Ok(FeatureMap::Taylor(TaylorFeatureMap::new(dim, *order, sigma_from_a(*a))?)),
            FeatureSpec::RandomFourier { nodes, a, seed } => {
                Ok(FeatureMap::Fourier(FourierFeatureMap::random(dim, *nodes, sigma_from_a(*a), *seed)?))
            }
            FeatureSpec::GaussHermite { degree, nodes, a, seed } => {
                let grid = HermiteGrid::new(*degree, dim)?;
                let rule = match nodes {
                    Some(n) => grid.subsample(*n, *seed)?,
                    None => grid.materialize(MAX_GRID_NODES)?,
                };
                Ok(FeatureMap::Fourier(FourierFeatureMap::from_rule(&rule, sigma_from_a(*a), Some(*seed))?))
            }
            FeatureSpec::Explicit(desc) => {
                let map = FeatureMap::from_descriptor(desc)?;
                if map.input_dim() != dim {
                    return Err(Error::invalid(format!(
                        "feature map expects dimension {}, configured for {dim}",
                        map.input_dim()
                    )));
                }
                Ok(map)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, d: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Central-difference Jacobian, independent of the analytic path.
    fn finite_difference(f: impl Fn(&[f64]) -> DVector<f64>, x: &[f64], h: f64) -> DMatrix<f64> {
        let d = x.len();
        let rows = f(x).len();
        let mut jac = DMatrix::zeros(rows, d);
        for m in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[m] += h;
            xm[m] -= h;
            let col = (f(&xp) - f(&xm)) / (2.0 * h);
            jac.set_column(m, &col);
        }
        jac
    }

    fn assert_jacobian_close(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) {
        let scale = numeric.amax().max(1e-12);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-4 * scale, "analytic {a} vs fd {n}");
        }
    }

    fn binomial(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn multi_index_enumeration() {
        let idx = enumerate_multi_indices(1, 2).unwrap();
        assert_eq!(idx, vec![MultiIndex(vec![0]), MultiIndex(vec![1]), MultiIndex(vec![2])]);
        assert_eq!(enumerate_multi_indices(5, 4).unwrap().len(), 126);
        assert_eq!(enumerate_multi_indices(7, 4).unwrap().len(), 330);

        let two = enumerate_multi_indices(2, 2).unwrap();
        let expected: Vec<MultiIndex> =
            [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]].iter().map(|a| MultiIndex(a.to_vec())).collect();
        assert_eq!(two, expected);
    }

    #[test]
    fn multi_index_counts_match_binomial_grid() {
        for d in 1..=6usize {
            for r in 0..=6u32 {
                let idx = enumerate_multi_indices(d, r).unwrap();
                assert_eq!(idx.len() as u64, binomial(d as u64 + r as u64, r as u64));
                assert!(idx.iter().all(|a| a.degree() <= r));
                assert!(idx.windows(2).all(|w| w[0].degree() <= w[1].degree()));
                let unique: std::collections::HashSet<_> = idx.iter().collect();
                assert_eq!(unique.len(), idx.len());
            }
        }
    }

    #[test]
    fn multi_index_capacity_error() {
        assert!(matches!(multi_index_count(1_000_000, 40), Err(Error::Capacity(_))));
        assert!(enumerate_multi_indices(0, 3).is_err());
    }

    #[test]
    fn taylor_zero_input() {
        let map = TaylorFeatureMap::new(3, 3, 0.7).unwrap();
        let f = map.eval(&[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(f[0], 1.0);
        assert!(f.iter().skip(1).all(|&v| v == 0.0));
        assert!(map.coefficients().iter().all(|&c| c > 0.0));
    }

    #[test]
    fn taylor_self_inner_product_is_partial_exponential_sum() {
        let r = 5;
        let map = TaylorFeatureMap::new(2, r, 1.0).unwrap();
        let f = map.eval(&[1.0, 0.0]).unwrap();
        let mut partial = 0.0;
        let mut fact = 1.0;
        for n in 0..=r {
            if n > 0 {
                fact *= n as f64;
            }
            partial += 1.0 / fact;
        }
        assert!((f.dot(&f) - (-1.0f64).exp() * partial).abs() < 1e-14);
    }

    #[test]
    fn taylor_kernel_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (d, r, sigma) in [(1usize, 8u32, 1.0f64), (2, 4, 0.9), (3, 6, 1.3)] {
            let map = FeatureMap::Taylor(TaylorFeatureMap::new(d, r, sigma).unwrap());
            for _ in 0..1000 {
                let x = random_point(&mut rng, d, -1.0, 1.0);
                let y = random_point(&mut rng, d, -1.0, 1.0);
                let exact = gaussian_kernel(&x, &y, 0.5 / (sigma * sigma));
                let approx = map.kernel(&x, &y).unwrap();
                assert!((exact - approx).abs() <= taylor_bound(&x, &y, sigma, r) + 1e-15);
                assert_eq!(approx, map.kernel(&y, &x).unwrap());
                assert!(map.kernel(&x, &x).unwrap() <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn taylor_bound_values() {
        assert_eq!(taylor_bound(&[0.0, 0.0], &[0.3, 0.1], 1.0, 4), 0.0);
        let expected = 1.0 / 362_880.0;
        assert!((taylor_bound(&[1.0], &[1.0], 1.0, 8) - expected).abs() < 1e-18);
        assert!((expected - 2.7557e-6).abs() < 1e-9);
    }

    #[test]
    fn gaussian_kernel_values() {
        assert_eq!(gaussian_kernel(&[0.3, -1.0], &[0.3, -1.0], 0.6), 1.0);
        assert_eq!(gaussian_kernel(&[5.0], &[-5.0], 0.0), 1.0);
        let k = gaussian_kernel(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 0.6);
        assert!((k - (-0.6f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn taylor_jacobian_at_origin() {
        let sigma = 0.8;
        let map = TaylorFeatureMap::new(3, 3, sigma).unwrap();
        let jac = map.jacobian(&[0.0; 3]).unwrap();
        for (l, a) in map.indices().iter().enumerate() {
            for m in 0..3 {
                let expected = if a.degree() == 1 && a.0[m] == 1 { 1.0 / sigma } else { 0.0 };
                assert!((jac[(l, m)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn taylor_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let map = TaylorFeatureMap::new(2, 4, 1.0).unwrap();
        for _ in 0..50 {
            let x = random_point(&mut rng, 2, -1.0, 1.0);
            let fd = finite_difference(|p| map.eval(p).unwrap(), &x, 1e-5);
            assert_jacobian_close(&map.jacobian(&x).unwrap(), &fd);
        }
    }

    #[test]
    fn taylor_jacobian_matches_quotient_form_away_from_zero() {
        // a_l (α_m / x_m − x_m / σ²) when every coordinate is nonzero.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let sigma = 1.2;
        let map = TaylorFeatureMap::new(3, 3, sigma).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3)
                .map(|_| {
                    let v: f64 = rng.random_range(0.1..1.0);
                    if rng.random::<bool>() { v } else { -v }
                })
                .collect();
            let f = map.eval(&x).unwrap();
            let jac = map.jacobian(&x).unwrap();
            for (l, a) in map.indices().iter().enumerate() {
                for m in 0..3 {
                    let quotient = f[l] * (a.0[m] as f64 / x[m] - x[m] / (sigma * sigma));
                    assert!((jac[(l, m)] - quotient).abs() <= 1e-12 * (1.0 + quotient.abs()));
                }
            }
        }
    }

    #[test]
    fn hermite_small_rules() {
        let (n, w) = hermite_1d(1).unwrap();
        assert_eq!((n, w), (vec![0.0], vec![1.0]));
        // Moment matching up to degree 3 for two symmetric nodes ±t with
        // weights p, 1−p: p = 1/2 (odd moments) and t² = 1 (second moment).
        let (n, w) = hermite_1d(2).unwrap();
        assert!((n[0] + 1.0).abs() < 1e-14 && (n[1] - 1.0).abs() < 1e-14);
        assert!((w[0] - 0.5).abs() < 1e-14 && (w[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn hermite_rules_are_exact() {
        for points in 1..=12usize {
            let (nodes, weights) = hermite_1d(points).unwrap();
            let rule = QuadratureRule {
                dim: 1,
                degree: None,
                nodes: nodes.iter().map(|&v| vec![v]).collect(),
                weights,
            };
            assert!((rule.weight_sum() - 1.0).abs() < 1e-10);
            let exact_degree = 2 * points as u32 - 1;
            let scale = gaussian_moment(&[exact_degree - exact_degree % 2]).max(1.0);
            assert!(rule.moment_residual(exact_degree).unwrap() <= 1e-8 * scale, "{points}");
        }
    }

    #[test]
    fn tensor_rule_mixed_moment() {
        let rule = gauss_hermite_rule(5, 2).unwrap();
        assert_eq!(rule.len(), 9);
        assert!((rule.weight_sum() - 1.0).abs() < 1e-10);
        let mixed: f64 = rule.nodes.iter().zip(&rule.weights).map(|(w, a)| a * w[0] * w[0] * w[1] * w[1]).sum();
        assert!((mixed - 1.0).abs() < 1e-8);
        assert!(rule.moment_residual(5).unwrap() <= 1e-8);
    }

    #[test]
    fn tensor_rule_exactness_grid() {
        for (degree, dim) in [(1, 1), (3, 2), (4, 3), (7, 2), (5, 4)] {
            let rule = gauss_hermite_rule(degree, dim).unwrap();
            assert!((rule.weight_sum() - 1.0).abs() < 1e-10);
            assert!(rule.moment_residual(degree).unwrap() <= 1e-8, "R={degree} d={dim}");
        }
    }

    #[test]
    fn grid_capacity_error() {
        assert!(matches!(gauss_hermite_rule(5, 32), Err(Error::Capacity(_))));
        let grid = HermiteGrid::new(5, 32).unwrap();
        assert_eq!(grid.subsample(64, 3).unwrap().len(), 64);
    }

    #[test]
    fn subsample_single_node_and_determinism() {
        let single = gauss_hermite_rule(1, 1).unwrap();
        let again = subsample_rule(&single, 1, 7).unwrap();
        assert_eq!(again.nodes, single.nodes);
        assert_eq!(again.weights, single.weights);

        let rule = gauss_hermite_rule(9, 2).unwrap();
        assert_eq!(subsample_rule(&rule, 50, 3).unwrap(), subsample_rule(&rule, 50, 3).unwrap());
        let empty = QuadratureRule { dim: 1, degree: None, nodes: vec![], weights: vec![] };
        assert!(matches!(subsample_rule(&empty, 3, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn subsampled_rule_kernel_rms() {
        let rule = gauss_hermite_rule(9, 2).unwrap();
        let sub = subsample_rule(&rule, 256, 2024).unwrap();
        let map = FeatureMap::Fourier(FourierFeatureMap::from_rule(&sub, 1.0, Some(2024)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sq = 0.0;
        let pairs = 500;
        for _ in 0..pairs {
            let x = random_point(&mut rng, 2, -1.0, 1.0);
            let y = random_point(&mut rng, 2, -1.0, 1.0);
            let e = map.kernel(&x, &y).unwrap() - gaussian_kernel(&x, &y, 0.5);
            sq += e * e;
        }
        assert!((sq / pairs as f64).sqrt() <= 0.1);
    }

    #[test]
    fn nnls_rule_examples() {
        let sym = nnls_rule(&[vec![-1.0], vec![1.0]], 1, 1, NNLS_RULE_THRESHOLD).unwrap();
        assert!((sym.rule.weights[0] - 0.5).abs() < 1e-14 && (sym.rule.weights[1] - 0.5).abs() < 1e-14);

        let candidates = sample_frequencies(20, 1, 17);
        let fitted = nnls_rule(&candidates, 3, 1, NNLS_RULE_THRESHOLD).unwrap();
        assert!(fitted.residual <= 1e-8);
        assert!(fitted.rule.weights.iter().all(|&w| w >= 0.0));
        assert!(fitted.rule.moment_residual(3).unwrap() <= fitted.residual + 1e-15);

        let err = nnls_rule(&[vec![0.4]], 2, 1, NNLS_RULE_THRESHOLD).unwrap_err();
        assert!(matches!(err, Error::RuleQuality { .. }));
    }

    #[test]
    fn fourier_unit_self_similarity_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let map = FeatureMap::Fourier(FourierFeatureMap::random(3, 16, 0.7, seed).unwrap());
            let x = random_point(&mut rng, 3, -2.0, 2.0);
            let y = random_point(&mut rng, 3, -2.0, 2.0);
            assert!((map.kernel(&x, &x).unwrap() - 1.0).abs() < 1e-14);
            assert_eq!(map.kernel(&x, &y).unwrap(), map.kernel(&y, &x).unwrap());
        }
    }

    #[test]
    fn random_fourier_kernel_rms() {
        let map = FeatureMap::Fourier(FourierFeatureMap::random(3, 512, 1.0, 5).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut sq = 0.0;
        for _ in 0..500 {
            let x = random_point(&mut rng, 3, -1.0, 1.0);
            let y = random_point(&mut rng, 3, -1.0, 1.0);
            let e = map.kernel(&x, &y).unwrap() - gaussian_kernel(&x, &y, 0.5);
            sq += e * e;
        }
        assert!((sq / 500.0).sqrt() <= 0.1);
    }

    #[test]
    fn fourier_jacobian() {
        let map = FourierFeatureMap::random(3, 10, 0.9, 1).unwrap();
        let at_origin = map.jacobian(&[0.0; 3]).unwrap();
        for i in 0..10 {
            assert!(at_origin.row(2 * i).iter().all(|&v| v == 0.0));
            for m in 0..3 {
                let expected = map.weights()[i].sqrt() * map.nodes()[i][m] / 0.9;
                assert!((at_origin[(2 * i + 1, m)] - expected).abs() < 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let x = random_point(&mut rng, 3, -1.5, 1.5);
            let fd = finite_difference(|p| map.eval(p).unwrap(), &x, 1e-5);
            assert_jacobian_close(&map.jacobian(&x).unwrap(), &fd);
        }
    }

    #[test]
    fn descriptor_round_trip_is_bit_exact() {
        let grid = HermiteGrid::new(5, 4).unwrap().subsample(12, 8).unwrap();
        let fourier = FeatureMap::Fourier(FourierFeatureMap::from_rule(&grid, 1.7, Some(8)).unwrap());
        let taylor = FeatureMap::Taylor(TaylorFeatureMap::new(4, 3, 0.6).unwrap());
        let x = [0.3, -0.2, 0.9, 0.1];
        for map in [fourier, taylor] {
            let json = serde_json::to_string(&map.descriptor()).unwrap();
            let back = FeatureMap::from_descriptor(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(map.eval(&x).unwrap(), back.eval(&x).unwrap());
        }
    }
}
