//! Gaussian kernel algebra, log-space weight arithmetic, ESS and categorical
//! sampling.
//!
//! Everything that touches densities or weights works on natural logarithms;
//! sums go through [`log_sum_exp`]. Covariances come in two flavours: a
//! diagonal representation with `O(d)` evaluation, and a dense one that keeps
//! its lower Cholesky factor so every evaluation is a triangular solve.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::twist::PsiFunction;

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("covariance must have dimension at least one")]
    EmptyDimension,
    #[error("covariance is not symmetric")]
    NotSymmetric,
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid weights: {0}")]
    InvalidWeights(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
enum Repr {
    Diagonal { var: DVector<f64>, sd: DVector<f64> },
    Dense { matrix: DMatrix<f64>, chol: DMatrix<f64> },
}

/// A symmetric positive-definite covariance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariance {
    repr: Repr,
    log_det: f64,
}

impl Covariance {
    /// Diagonal covariance from its variances.
    pub fn diagonal(var: DVector<f64>) -> Result<Self, MathError> {
        if var.is_empty() {
            return Err(MathError::EmptyDimension);
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(MathError::NotPositiveDefinite);
        }
        let log_det = var.iter().map(|v| v.ln()).sum();
        let sd = var.map(f64::sqrt);
        Ok(Self {
            repr: Repr::Diagonal { var, sd },
            log_det,
        })
    }

    pub fn scalar(var: f64) -> Result<Self, MathError> {
        Self::diagonal(DVector::from_element(1, var))
    }

    pub fn identity(dim: usize) -> Result<Self, MathError> {
        Self::diagonal(DVector::from_element(dim, 1.0))
    }

    /// Dense covariance. The matrix must be symmetric up to a relative
    /// tolerance of `1e-9`; it is symmetrized before factorization.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self, MathError> {
        let (rows, cols) = matrix.shape();
        if rows != cols {
            return Err(MathError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(MathError::EmptyDimension);
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(MathError::NotPositiveDefinite);
        }
        let scale = matrix.amax().max(f64::MIN_POSITIVE);
        for i in 0..rows {
            for j in 0..i {
                if (matrix[(i, j)] - matrix[(j, i)]).abs() > 1e-9 * scale {
                    return Err(MathError::NotSymmetric);
                }
            }
        }
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        let chol = matrix
            .clone()
            .cholesky()
            .ok_or(MathError::NotPositiveDefinite)?
            .unpack();
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(MathError::NotPositiveDefinite);
        }
        Ok(Self {
            repr: Repr::Dense { matrix, chol },
            log_det,
        })
    }

    /// Picks the diagonal representation when every off-diagonal entry is
    /// exactly zero, the dense one otherwise.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self, MathError> {
        let (rows, cols) = matrix.shape();
        if rows != cols {
            return Err(MathError::NotSquare { rows, cols });
        }
        let off_diagonal_zero =
            (0..rows).all(|i| (0..cols).all(|j| i == j || matrix[(i, j)] == 0.0));
        if off_diagonal_zero {
            Self::diagonal(matrix.diagonal())
        } else {
            Self::dense(matrix)
        }
    }

    pub fn dim(&self) -> usize {
        match &self.repr {
            Repr::Diagonal { var, .. } => var.len(),
            Repr::Dense { matrix, .. } => matrix.nrows(),
        }
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.repr, Repr::Diagonal { .. })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match &self.repr {
            Repr::Diagonal { var, .. } => DMatrix::from_diagonal(var),
            Repr::Dense { matrix, .. } => matrix.clone(),
        }
    }

    /// Variances (the diagonal entries).
    pub fn variances(&self) -> DVector<f64> {
        match &self.repr {
            Repr::Diagonal { var, .. } => var.clone(),
            Repr::Dense { matrix, .. } => matrix.diagonal(),
        }
    }

    /// Overwrites `v` with `L⁻¹v`, where `LLᵀ` is this covariance.
    pub fn whiten_in_place(&self, v: &mut [f64]) {
        match &self.repr {
            Repr::Diagonal { sd, .. } => {
                for (vi, si) in v.iter_mut().zip(sd.iter()) {
                    *vi /= si;
                }
            }
            Repr::Dense { chol, .. } => forward_substitute(chol, v),
        }
    }

    /// Overwrites `v` with `Σ⁻¹v`.
    pub fn solve_in_place(&self, v: &mut [f64]) {
        match &self.repr {
            Repr::Diagonal { var, .. } => {
                for (vi, si) in v.iter_mut().zip(var.iter()) {
                    *vi /= si;
                }
            }
            Repr::Dense { chol, .. } => {
                forward_substitute(chol, v);
                backward_substitute_transposed(chol, v);
            }
        }
    }

    /// `(x-mean)ᵀ Σ⁻¹ (x-mean)`, using `scratch` as workspace.
    pub fn mahalanobis_sq(&self, x: &[f64], mean: &[f64], scratch: &mut Vec<f64>) -> f64 {
        scratch.clear();
        scratch.extend(x.iter().zip(mean).map(|(a, b)| a - b));
        self.whiten_in_place(scratch);
        scratch.iter().map(|v| v * v).sum()
    }

    /// `log 𝒩(x; mean, Σ)`. Dimensions are the caller's responsibility.
    pub fn log_density(&self, x: &[f64], mean: &[f64], scratch: &mut Vec<f64>) -> f64 {
        let q = self.mahalanobis_sq(x, mean, scratch);
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + q)
    }

    /// Writes a draw from `𝒩(mean, Σ)` into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R, out: &mut [f64]) {
        match &self.repr {
            Repr::Diagonal { sd, .. } => {
                for ((o, m), s) in out.iter_mut().zip(mean).zip(sd.iter()) {
                    let z: f64 = rng.sample(StandardNormal);
                    *o = m + s * z;
                }
            }
            Repr::Dense { chol, .. } => {
                let d = mean.len();
                for o in out.iter_mut() {
                    *o = rng.sample(StandardNormal);
                }
                // out = mean + L z, filled bottom-up so z_j (j <= i) is still intact.
                for i in (0..d).rev() {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += chol[(i, j)] * out[j];
                    }
                    out[i] = mean[i] + acc;
                }
            }
        }
    }

    /// Sum of two covariances; stays diagonal when both operands are.
    pub fn add(&self, other: &Covariance) -> Result<Covariance, MathError> {
        if self.dim() != other.dim() {
            return Err(MathError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        match (&self.repr, &other.repr) {
            (Repr::Diagonal { var: a, .. }, Repr::Diagonal { var: b, .. }) => {
                Covariance::diagonal(a + b)
            }
            _ => Covariance::dense(self.to_matrix() + other.to_matrix()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<Covariance, MathError> {
        match &self.repr {
            Repr::Diagonal { var, .. } => Covariance::diagonal(var * factor),
            Repr::Dense { matrix, .. } => Covariance::dense(matrix * factor),
        }
    }
}

fn forward_substitute(l: &DMatrix<f64>, v: &mut [f64]) {
    let d = v.len();
    for i in 0..d {
        let mut acc = v[i];
        for j in 0..i {
            acc -= l[(i, j)] * v[j];
        }
        v[i] = acc / l[(i, i)];
    }
}

fn backward_substitute_transposed(l: &DMatrix<f64>, v: &mut [f64]) {
    let d = v.len();
    for i in (0..d).rev() {
        let mut acc = v[i];
        for j in i + 1..d {
            acc -= l[(j, i)] * v[j];
        }
        v[i] = acc / l[(i, i)];
    }
}

/// One weighted Gaussian: `exp(log_weight) · 𝒩(·; mean, cov)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub cov: Covariance,
    pub log_weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: Covariance, log_weight: f64) -> Result<Self, MathError> {
        if mean.len() != cov.dim() {
            return Err(MathError::DimensionMismatch {
                expected: cov.dim(),
                got: mean.len(),
            });
        }
        Ok(Self {
            mean,
            cov,
            log_weight,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log density at `x`, ignoring `log_weight`.
    pub fn log_density(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        self.cov.log_density(x, self.mean.as_slice(), scratch)
    }
}

/// `log 𝒩(x; comp.mean, comp.cov)`; the component weight is ignored.
pub fn log_gaussian_density(x: &DVector<f64>, comp: &GaussianComponent) -> Result<f64, MathError> {
    if x.len() != comp.dim() {
        return Err(MathError::DimensionMismatch {
            expected: comp.dim(),
            got: x.len(),
        });
    }
    Ok(comp.log_density(x.as_slice(), &mut Vec::with_capacity(x.len())))
}

/// Precomputed pieces of the product `𝒩(x; a₁, b₁)·𝒩(x; a₂, b₂)` for fixed
/// covariances, so that the product can be formed for many mean pairs at
/// `O(d²)` (or `O(d)` when both are diagonal) per pair.
#[derive(Clone, Debug)]
pub struct ProductPlan {
    sum: Covariance,
    gain: Gain,
    post: Covariance,
}

#[derive(Clone, Debug)]
enum Gain {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl ProductPlan {
    pub fn new(first: &Covariance, second: &Covariance) -> Result<Self, MathError> {
        let sum = first.add(second)?;
        match (&first.repr, &second.repr) {
            (Repr::Diagonal { var: v1, .. }, Repr::Diagonal { var: v2, .. }) => {
                let gain = v1.zip_map(v2, |a, b| a / (a + b));
                let post = v1.zip_map(v2, |a, b| a * b / (a + b));
                Ok(Self {
                    sum,
                    gain: Gain::Diagonal(gain),
                    post: Covariance::diagonal(post)?,
                })
            }
            _ => {
                let b1 = first.to_matrix();
                let chol = nalgebra::Cholesky::new(sum.to_matrix()).ok_or(MathError::NotPositiveDefinite)?;
                // X = S⁻¹ b₁, K = b₁ S⁻¹ = Xᵀ, b = b₁ - K b₁.
                let x = chol.solve(&b1);
                let gain = x.transpose();
                let post = &b1 - &gain * &b1;
                let post = (&post + post.transpose()) * 0.5;
                Ok(Self {
                    sum,
                    gain: Gain::Dense(gain),
                    post: Covariance::dense(post)?,
                })
            }
        }
    }

    /// `b₁ + b₂`.
    pub fn sum(&self) -> &Covariance {
        &self.sum
    }

    /// Covariance of the normalized product, `(b₁⁻¹ + b₂⁻¹)⁻¹`.
    pub fn posterior(&self) -> &Covariance {
        &self.post
    }

    /// `log 𝒩(a₁; a₂, b₁ + b₂)`.
    pub fn log_scale(&self, first_mean: &[f64], second_mean: &[f64], scratch: &mut Vec<f64>) -> f64 {
        self.sum.log_density(first_mean, second_mean, scratch)
    }

    /// Mean of the normalized product, `a₁ + b₁(b₁+b₂)⁻¹(a₂ - a₁)`.
    pub fn mean_into(&self, first_mean: &[f64], second_mean: &[f64], out: &mut [f64]) {
        match &self.gain {
            Gain::Diagonal(k) => {
                for i in 0..out.len() {
                    out[i] = first_mean[i] + k[i] * (second_mean[i] - first_mean[i]);
                }
            }
            Gain::Dense(k) => {
                let d = out.len();
                for i in 0..d {
                    let mut acc = first_mean[i];
                    for j in 0..d {
                        acc += k[(i, j)] * (second_mean[j] - first_mean[j]);
                    }
                    out[i] = acc;
                }
            }
        }
    }
}

/// `𝒩(x;a₁,b₁)·𝒩(x;a₂,b₂) = exp(log_scale)·𝒩(x;a,b)`.
///
/// The returned component carries `log_weight = 0`; input weights are ignored.
pub fn gaussian_product(
    c1: &GaussianComponent,
    c2: &GaussianComponent,
) -> Result<(f64, GaussianComponent), MathError> {
    if c1.dim() != c2.dim() {
        return Err(MathError::DimensionMismatch {
            expected: c1.dim(),
            got: c2.dim(),
        });
    }
    let plan = ProductPlan::new(&c1.cov, &c2.cov)?;
    let mut scratch = Vec::with_capacity(c1.dim());
    let log_scale = plan.log_scale(c1.mean.as_slice(), c2.mean.as_slice(), &mut scratch);
    let mut mean = DVector::zeros(c1.dim());
    plan.mean_into(c1.mean.as_slice(), c2.mean.as_slice(), mean.as_mut_slice());
    Ok((log_scale, GaussianComponent::new(mean, plan.post, 0.0)?))
}

/// `log ∫ 𝒩(u; comp) ψ(u) du`.
pub fn log_component_psi_integral(comp: &GaussianComponent, psi: &PsiFunction) -> Result<f64, MathError> {
    if comp.dim() != psi.dim() {
        return Err(MathError::DimensionMismatch {
            expected: psi.dim(),
            got: comp.dim(),
        });
    }
    let mut scratch = Vec::with_capacity(comp.dim());
    let mut terms = Vec::with_capacity(psi.components().len() + 1);
    if psi.constant() > 0.0 {
        terms.push(psi.constant().ln());
    }
    for c in psi.components() {
        let sum = comp.cov.add(&c.cov)?;
        terms.push(c.log_weight + sum.log_density(comp.mean.as_slice(), c.mean.as_slice(), &mut scratch));
    }
    Ok(psi.log_scale() + log_sum_exp(&terms))
}

/// `∫ 𝒩(u; comp) ψ(u) du`. May underflow; prefer [`log_component_psi_integral`].
pub fn component_psi_integral(comp: &GaussianComponent, psi: &PsiFunction) -> Result<f64, MathError> {
    log_component_psi_integral(comp, psi).map(f64::exp)
}

/// A normalized Gaussian mixture.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    components: Vec<GaussianComponent>,
    cumulative: Vec<f64>,
}

impl GaussianMixture {
    /// Normalizes the component log-weights so they sum to one.
    pub fn new(mut components: Vec<GaussianComponent>) -> Result<Self, MathError> {
        let Some(first) = components.first() else {
            return Err(MathError::InvalidWeights("mixture has no components"));
        };
        let dim = first.dim();
        if let Some(c) = components.iter().find(|c| c.dim() != dim) {
            return Err(MathError::DimensionMismatch {
                expected: dim,
                got: c.dim(),
            });
        }
        let lw: Vec<f64> = components.iter().map(|c| c.log_weight).collect();
        validate_log_weights(&lw)?;
        let total = log_sum_exp(&lw);
        let mut cumulative = Vec::with_capacity(components.len());
        let mut acc = 0.0;
        for c in components.iter_mut() {
            c.log_weight -= total;
            acc += c.log_weight.exp();
            cumulative.push(acc);
        }
        Ok(Self {
            components,
            cumulative,
        })
    }

    pub fn single(mean: DVector<f64>, cov: Covariance) -> Result<Self, MathError> {
        Self::new(vec![GaussianComponent::new(mean, cov, 0.0)?])
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        if self.components.len() == 1 {
            return self.components[0].log_density(x, scratch);
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.log_weight + c.log_density(x, scratch))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let k = if self.components.len() == 1 {
            0
        } else {
            let u: f64 = rng.random::<f64>() * self.cumulative[self.cumulative.len() - 1];
            pick_cumulative(&self.cumulative, u)
        };
        let c = &self.components[k];
        c.cov.sample_into(c.mean.as_slice(), rng, out);
    }
}

/// First index whose cumulative weight exceeds `u`, skipping zero-weight tails.
pub(crate) fn pick_cumulative(cumulative: &[f64], u: f64) -> usize {
    let n = cumulative.len();
    let mut i = cumulative.partition_point(|&c| c <= u);
    if i >= n {
        i = n - 1;
        while i > 0 && cumulative[i] == cumulative[i - 1] {
            i -= 1;
        }
    }
    i
}

/// `log Σ exp(xᵢ)`, max-shifted. Returns `-∞` for empty input or all `-∞`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log((1/n) Σ exp(xᵢ))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

fn validate_log_weights(log_weights: &[f64]) -> Result<(), MathError> {
    if log_weights.is_empty() {
        return Err(MathError::InvalidWeights("empty weight vector"));
    }
    if log_weights.iter().any(|w| w.is_nan()) {
        return Err(MathError::InvalidWeights("NaN log-weight"));
    }
    if log_weights.iter().any(|w| *w == f64::INFINITY) {
        return Err(MathError::InvalidWeights("infinite log-weight"));
    }
    if log_weights.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(MathError::InvalidWeights("all weights are zero"));
    }
    Ok(())
}

/// Linear-domain weights scaled so the largest equals one.
pub fn shifted_weights(log_weights: &[f64]) -> Result<Vec<f64>, MathError> {
    validate_log_weights(log_weights)?;
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(log_weights.iter().map(|w| (w - max).exp()).collect())
}

/// Effective sample size `(Σ W)² / Σ W²` of a vector of log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64, MathError> {
    let w = shifted_weights(log_weights)?;
    let (s, s2) = w.iter().fold((0.0, 0.0), |(s, s2), v| (s + v, s2 + v * v));
    Ok(s * s / s2)
}

/// Walker–Vose alias table over linear-domain weights.
#[derive(Clone, Debug)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self, MathError> {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        if n == 0 || !(total > 0.0) || !total.is_finite() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(MathError::InvalidWeights("alias table needs non-negative weights with positive sum"));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![1.0; n];
        let mut alias: Vec<usize> = (0..n).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding.
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
        }
        Ok(Self { prob, alias })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.prob.len();
        let i = ((rng.random::<f64>() * n as f64) as usize).min(n - 1);
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }
}

/// Inverse-CDF sampler with a guide table (cutpoint method): `O(N)` build,
/// `O(1)` expected per draw.
#[derive(Clone, Debug)]
pub struct GuideTable {
    cumulative: Vec<f64>,
    guide: Vec<usize>,
}

impl GuideTable {
    pub fn new(weights: &[f64]) -> Result<Self, MathError> {
        let n = weights.len();
        if n == 0 || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(MathError::InvalidWeights("guide table needs finite non-negative weights"));
        }
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for w in weights {
            acc += w;
            cumulative.push(acc);
        }
        if !(acc > 0.0) {
            return Err(MathError::InvalidWeights("all weights are zero"));
        }
        let mut guide = Vec::with_capacity(n);
        let mut i = 0;
        for j in 0..n {
            let cut = j as f64 / n as f64 * acc;
            while i < n - 1 && cumulative[i] <= cut {
                i += 1;
            }
            guide.push(i);
        }
        Ok(Self { cumulative, guide })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let n = self.cumulative.len();
        let total = self.cumulative[n - 1];
        let frac: f64 = rng.random();
        let u = frac * total;
        let mut i = self.guide[((frac * n as f64) as usize).min(n - 1)];
        while i > 0 && self.cumulative[i - 1] > u {
            i -= 1;
        }
        while i < n - 1 && self.cumulative[i] <= u {
            i += 1;
        }
        // Skip a zero-weight tail hit by rounding at u ≈ total.
        while i > 0 && self.cumulative[i] == self.cumulative[i - 1] && self.cumulative[i] <= u {
            i -= 1;
        }
        i
    }
}

/// `count` i.i.d. indices drawn proportionally to `exp(log_weights)`.
///
/// Uses an alias table when `count` exceeds the number of categories and a
/// guide-table inverse CDF otherwise.
pub fn categorical_sample<R: Rng + ?Sized>(
    rng: &mut R,
    log_weights: &[f64],
    count: usize,
) -> Result<Vec<usize>, MathError> {
    let w = shifted_weights(log_weights)?;
    if count > w.len() {
        let table = AliasTable::new(&w)?;
        Ok((0..count).map(|_| table.sample(rng)).collect())
    } else {
        let table = GuideTable::new(&w)?;
        Ok((0..count).map(|_| table.sample(rng)).collect())
    }
}
