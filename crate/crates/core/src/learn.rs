//! Backward approximation of the optimal twisting sequence.
//!
//! At each step the targets `g(ξ_t^i, y_t) f(ξ_t^i, ψ_{t+1})` at the particle
//! support points are fitted by a scaled Gaussian in the least-squares sense,
//!
//! ```text
//! minimize over (m, Σ, s):  Σ_i [s 𝒩(ξ_i; m, Σ) − ψ_i]²,
//! ```
//!
//! and the result is returned as `𝒩(·; m*, Σ*) + c`. The scale `s` sits on the
//! Gaussian so that shrinking `𝒩` at the support points is never rewarded. It
//! is profiled out in closed form and the remaining parameters are solved by damped
//! Gauss–Newton (Levenberg–Marquardt) on the mean and the Cholesky factor of
//! the precision, with log-parameterized diagonal. Steps are accepted only if
//! the objective strictly decreases.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::filter::FilterOutput;
use crate::hmm::{HmmModel, ModelError, PsiApplier};
use crate::math::{log_component_psi_integral, log_sum_exp, Covariance, GaussianComponent, MathError, LN_2PI};
use crate::twist::{PsiFunction, PsiSequence, TwistError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit needs at least {needed} support points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("support points and targets disagree: {0}")]
    Shape(String),
    #[error("target {index} is NaN or +inf")]
    InvalidTarget { index: usize },
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Twist(#[from] TwistError),
    #[error("fit failed at t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<FitError>,
    },
}

/// The positive constant `c` added to the fitted Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    /// `(2π)^{-d/2} |Σ*|^{-1/2} / N`.
    PeakOverN,
    /// `(2π)^{-d/2} |Σ*|^{-1/2} / N²`.
    PeakOverNSquared,
    /// `median_i f(ξ_{t-1}^i, 𝒩_t) / N`, with `μ(𝒩_0)` at `t = 0`; the
    /// untwisted component of `f^ψ_t` then has weight about `1/N` at a
    /// typical particle in any dimension. Without a filter run the median
    /// of `𝒩` over the fitting support is used.
    PropagatedMedianOverN,
    /// As [`Regularizer::PropagatedMedianOverN`] divided by `N²`.
    PropagatedMedianOverNSquared,
    Fixed(f64),
}

impl Regularizer {
    fn divisor_power(self) -> i32 {
        match self {
            Regularizer::PeakOverN | Regularizer::PropagatedMedianOverN => 1,
            _ => 2,
        }
    }

    fn propagated(self) -> bool {
        matches!(self, Regularizer::PropagatedMedianOverN | Regularizer::PropagatedMedianOverNSquared)
    }
}

/// Starting point of the Gauss–Newton iterations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FitInit {
    /// Target-weighted mean and variance of the support points.
    WeightedMoments,
    /// Diagonal Gaussian read off a least-squares fit of the log-targets by
    /// a separable quadratic; falls back to the weighted moments when the
    /// regression is unusable. Exact for Gaussian targets.
    #[default]
    LogQuadratic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub diagonal_only: bool,
    pub init: FitInit,
    pub max_gauss_newton_iters: usize,
    pub param_tolerance: f64,
    /// Stop once an accepted step lowers the objective by less than this
    /// fraction.
    pub objective_tolerance: f64,
    pub regularizer: Regularizer,
    /// Upper bound on each fitted variance, as a multiple of the support
    /// variance in that coordinate.
    pub max_variance_ratio: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            diagonal_only: true,
            init: FitInit::LogQuadratic,
            max_gauss_newton_iters: 30,
            param_tolerance: 1e-8,
            objective_tolerance: 1e-6,
            regularizer: Regularizer::PropagatedMedianOverN,
            max_variance_ratio: 100.0,
        }
    }
}

/// Support points (row-major `N × d`) and log-targets.
#[derive(Clone, Debug)]
pub struct FitProblem {
    pub dim: usize,
    pub points: Vec<f64>,
    pub log_targets: Vec<f64>,
}

impl FitProblem {
    pub fn new(dim: usize, points: Vec<f64>, log_targets: Vec<f64>) -> Result<Self, FitError> {
        if dim == 0 || points.len() != dim * log_targets.len() {
            return Err(FitError::Shape(format!(
                "{} coordinates for {} targets in dimension {dim}",
                points.len(),
                log_targets.len()
            )));
        }
        if let Some(index) = log_targets.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(FitError::InvalidTarget { index });
        }
        Ok(Self {
            dim,
            points,
            log_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.log_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_targets.is_empty()
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Diagnostics of one fit.
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Profiled scale, relative to the targets shifted so that their maximum is one.
    pub lambda: f64,
    /// Objective at the initializer followed by the value after each accepted step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    /// The degenerate-target branch was taken.
    pub degenerate: bool,
}

impl FitReport {
    pub fn initial_objective(&self) -> f64 {
        self.objective_history[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective_history.last().expect("history is non-empty")
    }
}

/// `λ = Σ n_i ψ_i / Σ ψ_i²`.
pub fn profile_lambda(n: &[f64], psi: &[f64]) -> f64 {
    let (np, pp) = n.iter().zip(psi).fold((0.0, 0.0), |(a, b), (ni, pi)| (a + ni * pi, b + pi * pi));
    np / pp
}

/// `log g(ξ_i, y_t) + log f(ξ_i, ψ_{t+1})`, with `ψ_T ≡ 1` when `psi_next` is `None`.
pub fn backward_targets(
    model: &HmmModel,
    t: usize,
    points: &[f64],
    psi_next: Option<&PsiFunction>,
) -> Result<Vec<f64>, FitError> {
    let d = model.dim_state();
    if points.len() % d != 0 {
        return Err(FitError::Shape(format!("{} coordinates in dimension {d}", points.len())));
    }
    let applier = psi_next.map(|p| PsiApplier::new(model.transition(), p)).transpose()?;
    let mut mean = Vec::with_capacity(d);
    let mut scratch = Vec::with_capacity(d);
    Ok(points
        .chunks_exact(d)
        .map(|x| {
            let lf = applier.as_ref().map_or(0.0, |a| a.log_apply(x, &mut mean, &mut scratch));
            model.log_g(t, x) + lf
        })
        .collect())
}

/// Parameters: mean `m`, log-diagonal of the lower-triangular `W` with
/// `Σ⁻¹ = WᵀW`, then (dense fits only) the strictly-lower entries of `W`
/// row by row.
#[derive(Clone, Debug)]
struct Params {
    dim: usize,
    dense: bool,
    theta: Vec<f64>,
}

impl Params {
    fn count(dim: usize, dense: bool) -> usize {
        2 * dim + if dense { dim * (dim - 1) / 2 } else { 0 }
    }

    fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>, dense: bool) -> Result<Self, FitError> {
        let d = mean.len();
        let mut theta = Vec::with_capacity(Self::count(d, dense));
        theta.extend(mean.iter());
        if dense {
            let chol = cov.clone().cholesky().ok_or(MathError::NotPositiveDefinite)?;
            let w = chol.l().solve_lower_triangular(&DMatrix::identity(d, d)).ok_or(MathError::NotPositiveDefinite)?;
            theta.extend((0..d).map(|j| w[(j, j)].ln()));
            for j in 1..d {
                for k in 0..j {
                    theta.push(w[(j, k)]);
                }
            }
        } else {
            theta.extend((0..d).map(|j| -0.5 * cov[(j, j)].ln()));
        }
        Ok(Self { dim: d, dense, theta })
    }

    fn mean(&self) -> &[f64] {
        &self.theta[..self.dim]
    }

    fn log_diag(&self) -> &[f64] {
        &self.theta[self.dim..2 * self.dim]
    }

    fn w_matrix(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut w = DMatrix::zeros(d, d);
        for j in 0..d {
            w[(j, j)] = self.log_diag()[j].exp();
        }
        if self.dense {
            let mut idx = 2 * d;
            for j in 1..d {
                for k in 0..j {
                    w[(j, k)] = self.theta[idx];
                    idx += 1;
                }
            }
        }
        w
    }

    fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        if !self.dense {
            return DMatrix::from_diagonal(&DVector::from_iterator(d, self.log_diag().iter().map(|l| (-2.0 * l).exp())));
        }
        let w = self.w_matrix();
        let l = w
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("diagonal of W is positive");
        let cov = &l * l.transpose();
        (&cov + cov.transpose()) * 0.5
    }

    /// `log` of the peak density `(2π)^{-d/2} |Σ|^{-1/2}`.
    fn log_peak(&self) -> f64 {
        -0.5 * self.dim as f64 * LN_2PI + self.log_diag().iter().sum::<f64>()
    }
}

struct Workspace {
    u: Vec<f64>,
    z: Vec<f64>,
    w: DMatrix<f64>,
}

/// Fills `n_i = 𝒩(ξ_i; m, Σ)` and, if requested, the Jacobian rows
/// `∂n_i/∂θ`.
fn evaluate(
    problem: &FitProblem,
    params: &Params,
    n: &mut [f64],
    mut jac: Option<&mut DMatrix<f64>>,
    ws: &mut Workspace,
) {
    let d = params.dim;
    let log_peak = params.log_peak();
    let mean = params.mean();
    if params.dense {
        ws.w = params.w_matrix();
    }
    let wdiag: Vec<f64> = params.log_diag().iter().map(|l| l.exp()).collect();
    for i in 0..problem.len() {
        let x = problem.point(i);
        for j in 0..d {
            ws.u[j] = x[j] - mean[j];
        }
        if params.dense {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..=j {
                    acc += ws.w[(j, k)] * ws.u[k];
                }
                ws.z[j] = acc;
            }
        } else {
            for j in 0..d {
                ws.z[j] = wdiag[j] * ws.u[j];
            }
        }
        let q: f64 = ws.z.iter().map(|v| v * v).sum();
        let ni = (log_peak - 0.5 * q).exp();
        n[i] = ni;
        let Some(jac) = jac.as_deref_mut() else { continue };
        if params.dense {
            // ∂ log n / ∂m = Wᵀz
            for k in 0..d {
                let mut acc = 0.0;
                for j in k..d {
                    acc += ws.w[(j, k)] * ws.z[j];
                }
                jac[(i, k)] = ni * acc;
            }
            for j in 0..d {
                jac[(i, d + j)] = ni * (1.0 - ws.z[j] * ws.u[j] * wdiag[j]);
            }
            let mut idx = 2 * d;
            for j in 1..d {
                for k in 0..j {
                    jac[(i, idx)] = -ni * ws.z[j] * ws.u[k];
                    idx += 1;
                }
            }
        } else {
            for j in 0..d {
                jac[(i, j)] = ni * wdiag[j] * ws.z[j];
                jac[(i, d + j)] = ni * (1.0 - ws.z[j] * ws.z[j]);
            }
        }
    }
}

/// Profiled objective `min_s ‖s·n − ψ‖² = ‖ψ‖² − (n·ψ)²/‖n‖²`, clamped at zero
/// against rounding.
fn objective(n: &[f64], psi: &[f64], psi_sq: f64) -> f64 {
    let (nn, np) = n.iter().zip(psi).fold((0.0, 0.0), |(a, b), (ni, pi)| (a + ni * ni, b + ni * pi));
    if nn > 0.0 {
        (psi_sq - np * np / nn).max(0.0)
    } else {
        psi_sq
    }
}

fn weighted_moments(problem: &FitProblem, weights: &[f64], dense: bool) -> (DVector<f64>, DMatrix<f64>) {
    let d = problem.dim;
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            for (j, x) in problem.point(i).iter().enumerate() {
                mean[j] += w * x;
            }
        }
    }
    mean /= total;
    let mut cov = DMatrix::zeros(d, d);
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            let x = problem.point(i);
            for j in 0..d {
                let uj = x[j] - mean[j];
                if dense {
                    for k in 0..=j {
                        cov[(j, k)] += w * uj * (x[k] - mean[k]);
                    }
                } else {
                    cov[(j, j)] += w * uj * uj;
                }
            }
        }
    }
    cov /= total;
    for j in 0..d {
        for k in 0..j {
            cov[(k, j)] = cov[(j, k)];
        }
    }
    (mean, cov)
}

/// Diagonal Gaussian read off an ordinary least-squares fit of the log-targets
/// on `1, z_j, z_j²` with standardized coordinates `z`. Coordinates without
/// negative curvature get the support mean and the variance cap.
fn log_quadratic_moments(
    problem: &FitProblem,
    centre: &DVector<f64>,
    support_var: &[f64],
    floor: &[f64],
    cap: &[f64],
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let d = problem.dim;
    let p = 2 * d + 1;
    let rows: Vec<usize> = (0..problem.len()).filter(|&i| problem.log_targets[i].is_finite()).collect();
    if rows.len() < 2 * p {
        return None;
    }
    let scale: Vec<f64> = support_var.iter().map(|v| v.sqrt()).collect();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for &i in &rows {
        let x = problem.point(i);
        row[0] = 1.0;
        for j in 0..d {
            let z = (x[j] - centre[j]) / scale[j];
            row[1 + j] = z;
            row[1 + d + j] = z * z;
        }
        let y = problem.log_targets[i];
        for a in 0..p {
            xty[a] += row[a] * y;
            for b in 0..=a {
                xtx[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let ridge = 1e-10 * (0..p).map(|a| xtx[(a, a)]).fold(0.0, f64::max);
    for a in 0..p {
        xtx[(a, a)] += ridge;
    }
    let coef = xtx.cholesky()?.solve(&xty);
    if coef.iter().any(|c| !c.is_finite()) {
        return None;
    }
    let mut mean = centre.clone();
    let mut var = DVector::zeros(d);
    for j in 0..d {
        let (b, a) = (coef[1 + j], coef[1 + d + j]);
        if a < 0.0 {
            let vz = -0.5 / a;
            mean[j] = centre[j] + scale[j] * b * vz;
            var[j] = (support_var[j] * vz).clamp(floor[j], cap[j]);
        } else {
            var[j] = cap[j];
        }
    }
    Some((mean, DMatrix::from_diagonal(&var)))
}

fn usable_covariance(cov: &DMatrix<f64>, floor: &[f64]) -> bool {
    (0..cov.nrows()).all(|j| cov[(j, j)] > floor[j]) && cov.clone().cholesky().is_some()
}

/// `𝒩(·; m, Σ) + c`, stored as `e^{ℓ}(c e^{-ℓ} + e^{-ℓ}𝒩)` with the
/// reference level `ℓ` of the rule.
fn build_psi(
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    n_reg: usize,
    rule: Regularizer,
    log_reference: Option<f64>,
) -> Result<PsiFunction, FitError> {
    let d = mean.len();
    let cov = Covariance::from_matrix(cov)?;
    if let Regularizer::Fixed(c) = rule {
        let comp = GaussianComponent::new(mean, cov, 0.0)?;
        return Ok(PsiFunction::new(d, c, vec![comp])?);
    }
    let log_peak = -0.5 * (d as f64 * LN_2PI + cov.log_det());
    let level = log_reference.filter(|v| v.is_finite()).unwrap_or(log_peak);
    let n = n_reg.max(1) as f64;
    let c = n.powi(-rule.divisor_power());
    let comp = GaussianComponent::new(mean, cov, -level)?;
    Ok(PsiFunction::new(d, c, vec![comp])?.with_log_scale(level))
}

fn log_median(mut values: Vec<f64>) -> Option<f64> {
    values.retain(|v| v.is_finite());
    if values.is_empty() {
        return None;
    }
    let mid = values.len() / 2;
    let (_, m, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    Some(*m)
}

fn unit_gaussian(report: &FitReport) -> Result<PsiFunction, FitError> {
    let comp = GaussianComponent::new(report.mean.clone(), Covariance::from_matrix(report.cov.clone())?, 0.0)?;
    Ok(PsiFunction::new(report.mean.len(), 0.0, vec![comp])?)
}

/// Median of `log 𝒩(ξ_i; m*, Σ*)` over the fitting support.
fn support_log_reference(problem: &FitProblem, report: &FitReport) -> Result<Option<f64>, FitError> {
    let cov = Covariance::from_matrix(report.cov.clone())?;
    let mut s = Vec::new();
    let values = (0..problem.len())
        .map(|i| cov.log_density(problem.point(i), report.mean.as_slice(), &mut s))
        .collect();
    Ok(log_median(values))
}

/// Median of `log f(ξ_{t-1}^i, 𝒩_t)` over the previous particles, or
/// `log μ(𝒩_0)`.
fn propagated_log_reference(model: &HmmModel, out: &FilterOutput, t: usize, report: &FitReport) -> Result<Option<f64>, FitError> {
    let gauss = unit_gaussian(report)?;
    if t == 0 {
        let terms: Vec<f64> = model
            .initial()
            .components()
            .iter()
            .map(|c| log_component_psi_integral(c, &gauss).map(|v| v + c.log_weight))
            .collect::<Result<_, _>>()?;
        let v = log_sum_exp(&terms);
        return Ok(v.is_finite().then_some(v));
    }
    let applier = PsiApplier::new(model.transition(), &gauss)?;
    let d = model.dim_state();
    let mut mean = Vec::with_capacity(d);
    let mut scratch = Vec::with_capacity(d);
    let values = out
        .particles_at(t - 1)
        .chunks_exact(d)
        .map(|x| applier.log_apply(x, &mut mean, &mut scratch))
        .collect();
    Ok(log_median(values))
}

/// Fits `𝒩(·; m*, Σ*)` to the targets and returns the diagnostics.
pub fn fit_gaussian(problem: &FitProblem, config: &FitConfig) -> Result<FitReport, FitError> {
    let d = problem.dim;
    let n_pts = problem.len();
    if n_pts < d + 2 {
        return Err(FitError::TooFewPoints { needed: d + 2, got: n_pts });
    }
    let dense = !config.diagonal_only;

    let uniform = vec![1.0; n_pts];
    let (raw_mean, mut raw_cov) = weighted_moments(problem, &uniform, dense);
    let support_var: Vec<f64> = (0..d).map(|j| raw_cov[(j, j)].max(1e-12 * (1.0 + raw_mean[j].abs()).powi(2))).collect();
    for j in 0..d {
        raw_cov[(j, j)] = raw_cov[(j, j)].max(support_var[j]);
    }
    if dense && raw_cov.clone().cholesky().is_none() {
        raw_cov = DMatrix::from_diagonal(&DVector::from_vec(support_var.clone()));
    }
    let floor: Vec<f64> = support_var.iter().map(|v| 1e-10 * v).collect();
    let cap: Vec<f64> = support_var.iter().map(|v| config.max_variance_ratio * v).collect();

    let max_log = problem.log_targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let psi: Vec<f64> = if max_log == f64::NEG_INFINITY {
        vec![0.0; n_pts]
    } else {
        problem.log_targets.iter().map(|l| (l - max_log).exp()).collect()
    };
    let psi_min = psi.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = max_log == f64::NEG_INFINITY || 1.0 - psi_min <= 1e-12;
    let psi_sq: f64 = psi.iter().map(|p| p * p).sum();

    let mut ws = Workspace {
        u: vec![0.0; d],
        z: vec![0.0; d],
        w: DMatrix::zeros(d, d),
    };
    let mut n = vec![0.0; n_pts];

    if degenerate {
        let params = Params::from_moments(&raw_mean, &raw_cov, dense)?;
        evaluate(problem, &params, &mut n, None, &mut ws);
        let f = if psi_sq > 0.0 { objective(&n, &psi, psi_sq) } else { n.iter().map(|v| v * v).sum() };
        return Ok(FitReport {
            lambda: if psi_sq > 0.0 { profile_lambda(&n, &psi) } else { 0.0 },
            mean: raw_mean,
            cov: params.covariance(),
            objective_history: vec![f],
            iterations: 0,
            degenerate: true,
        });
    }

    let (mut init_mean, mut init_cov) = weighted_moments(problem, &psi, dense);
    if !usable_covariance(&init_cov, &floor) {
        init_mean = raw_mean.clone();
        init_cov = raw_cov.clone();
    }
    for j in 0..d {
        init_cov[(j, j)] = init_cov[(j, j)].min(cap[j]);
    }
    let mut params = Params::from_moments(&init_mean, &init_cov, dense)?;
    evaluate(problem, &params, &mut n, None, &mut ws);
    let mut f = objective(&n, &psi, psi_sq);
    let regression = match config.init {
        FitInit::LogQuadratic => log_quadratic_moments(problem, &raw_mean, &support_var, &floor, &cap),
        FitInit::WeightedMoments => None,
    };
    if let Some((q_mean, q_cov)) = regression {
        let candidate = Params::from_moments(&q_mean, &q_cov, dense)?;
        evaluate(problem, &candidate, &mut n, None, &mut ws);
        let fq = objective(&n, &psi, psi_sq);
        if fq.is_finite() && fq < psi_sq {
            params = candidate;
            f = fq;
        }
    }
    // Bounds on the log-diagonal of W: ℓ_j = -½ log(variance_j).
    let lo: Vec<f64> = cap.iter().map(|v| -0.5 * v.ln()).collect();
    let hi: Vec<f64> = floor.iter().map(|v| -0.5 * v.ln()).collect();

    let mut history = vec![f];
    let p = Params::count(d, dense);
    let mut jac = DMatrix::zeros(n_pts, p);
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut trial_n = vec![0.0; n_pts];

    while iterations < config.max_gauss_newton_iters && f > 0.0 {
        evaluate(problem, &params, &mut n, Some(&mut jac), &mut ws);
        let nn: f64 = n.iter().map(|v| v * v).sum();
        if nn <= 0.0 {
            break;
        }
        let s = n.iter().zip(&psi).map(|(a, b)| a * b).sum::<f64>() / nn;
        let r = DVector::from_iterator(n_pts, n.iter().zip(&psi).map(|(a, b)| s * a - b));
        let grad = jac.tr_mul(&r) * s;
        let n_vec = DVector::from_column_slice(&n);
        let jn = jac.tr_mul(&n_vec);
        let mut h = jac.tr_mul(&jac);
        h -= &jn * jn.transpose() / nn;
        h *= s * s;
        let hdiag: Vec<f64> = (0..p).map(|k| h[(k, k)].max(0.0)).collect();
        let hscale = hdiag.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);

        let mut accepted = None;
        for _ in 0..30 {
            let mut a = h.clone();
            for k in 0..p {
                a[(k, k)] += mu * hdiag[k] + mu * 1e-12 * hscale;
            }
            if let Some(chol) = a.cholesky() {
                let step = chol.solve(&(-&grad));
                let mut trial = params.clone();
                for k in 0..p {
                    trial.theta[k] += step[k];
                }
                for j in 0..d {
                    let v = &mut trial.theta[d + j];
                    *v = v.clamp(lo[j], hi[j]);
                }
                evaluate(problem, &trial, &mut trial_n, None, &mut ws);
                let ft = objective(&trial_n, &psi, psi_sq);
                if ft.is_finite() && ft < f {
                    let moved = trial
                        .theta
                        .iter()
                        .zip(&params.theta)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    accepted = Some((trial, ft, moved));
                    mu = (mu / 3.0).max(1e-12);
                    break;
                }
            }
            mu *= 4.0;
            if mu > 1e12 {
                break;
            }
        }
        let Some((trial, ft, moved)) = accepted else { break };
        iterations += 1;
        params = trial;
        let decrease = f - ft;
        f = ft;
        history.push(f);
        if moved < config.param_tolerance || decrease <= config.objective_tolerance * (f + decrease) {
            break;
        }
    }

    evaluate(problem, &params, &mut n, None, &mut ws);
    Ok(FitReport {
        mean: DVector::from_column_slice(params.mean()),
        cov: params.covariance(),
        lambda: profile_lambda(&n, &psi),
        objective_history: history,
        iterations,
        degenerate: false,
    })
}

/// Fits the targets and returns `𝒩(·; m*, Σ*) + c`.
pub fn fit_psi(problem: &FitProblem, n_for_regularizer: usize, config: &FitConfig) -> Result<PsiFunction, FitError> {
    let report = fit_gaussian(problem, config)?;
    let reference = if config.regularizer.propagated() { support_log_reference(problem, &report)? } else { None };
    build_psi(report.mean, report.cov, n_for_regularizer, config.regularizer, reference)
}

/// One backward sweep over a filter run: `ψ_{T-1}, …, ψ_0` are fitted at
/// the particles of each step.
pub fn approximate_psi_sequence(model: &HmmModel, out: &FilterOutput, config: &FitConfig) -> Result<PsiSequence, FitError> {
    let len = model.len();
    if out.len() != len || out.dim() != model.dim_state() {
        return Err(FitError::Shape("filter output does not match the model".into()));
    }
    let n = out.n_particles();
    let mut psis: Vec<PsiFunction> = Vec::with_capacity(len);
    for t in (0..len).rev() {
        let at = |source: FitError| FitError::AtStep { t, source: Box::new(source) };
        let points = out.particles_at(t);
        let targets = backward_targets(model, t, points, psis.last()).map_err(at)?;
        let problem = FitProblem::new(model.dim_state(), points.to_vec(), targets).map_err(at)?;
        let report = fit_gaussian(&problem, config).map_err(at)?;
        let reference = if config.regularizer.propagated() {
            propagated_log_reference(model, out, t, &report).map_err(at)?
        } else {
            None
        };
        psis.push(build_psi(report.mean, report.cov, n, config.regularizer, reference).map_err(at)?);
    }
    psis.reverse();
    Ok(PsiSequence::new(psis)?)
}
