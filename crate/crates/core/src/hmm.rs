//! Hidden Markov model definitions: Gaussian-mixture initial laws, transition
//! kernels in the Gaussian-mixture class, opaque observation densities, and
//! the three concrete families (linear-Gaussian, univariate and multivariate
//! stochastic volatility).
//!
//! A [`StateSpaceModel`] is the `(μ, f, g)` triple without data; binding an
//! [`Observations`] record gives an [`HmmModel`]. Time indices are zero-based
//! throughout the crate: `t ∈ 0..T`.

use std::fmt::Debug;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::math::{
    log_component_psi_integral, log_sum_exp, Covariance, GaussianComponent, GaussianMixture,
    MathError, LN_2PI,
};
use crate::twist::PsiFunction;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("observation file: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<(), ModelError> {
    if expected != got {
        return Err(ModelError::DimensionMismatch { what, expected, got });
    }
    Ok(())
}

/// A linear map that is either diagonal or dense.
#[derive(Clone, Debug, PartialEq)]
pub enum LinearMap {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl LinearMap {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let (r, c) = matrix.shape();
        let diagonal = r == c && (0..r).all(|i| (0..c).all(|j| i == j || matrix[(i, j)] == 0.0));
        if diagonal {
            LinearMap::Diagonal(matrix.diagonal())
        } else {
            LinearMap::Dense(matrix)
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        match self {
            LinearMap::Diagonal(v) => DMatrix::from_diagonal(v),
            LinearMap::Dense(m) => m.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            LinearMap::Diagonal(v) => v.len(),
            LinearMap::Dense(m) => m.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            LinearMap::Diagonal(v) => v.len(),
            LinearMap::Dense(m) => m.ncols(),
        }
    }

    /// `out = M x + offset`.
    pub fn apply_into(&self, x: &[f64], offset: &[f64], out: &mut [f64]) {
        match self {
            LinearMap::Diagonal(v) => {
                for i in 0..out.len() {
                    out[i] = v[i] * x[i] + offset[i];
                }
            }
            LinearMap::Dense(m) => {
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = offset[i];
                    for (j, xj) in x.iter().enumerate() {
                        acc += m[(i, j)] * xj;
                    }
                    *o = acc;
                }
            }
        }
    }
}

/// `f(x, ·) = 𝒩(· ; M x + offset, cov)`.
#[derive(Clone, Debug)]
pub struct LinearTransition {
    pub map: LinearMap,
    pub offset: DVector<f64>,
    pub cov: Covariance,
}

impl LinearTransition {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>, cov: Covariance) -> Result<Self, ModelError> {
        let d = cov.dim();
        check_dim("transition matrix rows", d, matrix.nrows())?;
        check_dim("transition matrix columns", d, matrix.ncols())?;
        check_dim("transition offset", d, offset.len())?;
        Ok(Self {
            map: LinearMap::from_matrix(matrix),
            offset,
            cov,
        })
    }

    pub fn mean_into(&self, x: &[f64], out: &mut [f64]) {
        self.map.apply_into(x, self.offset.as_slice(), out);
    }
}

/// A transition density in the Gaussian-mixture class with state-dependent
/// weights, means and covariances. `components(x)` must return log-weights
/// whose exponentials sum to one.
pub trait MixtureTransition: Send + Sync + Debug {
    fn dim(&self) -> usize;
    fn components(&self, x: &[f64]) -> Vec<GaussianComponent>;
}

/// Transition kernel: the single-Gaussian linear case gets a dedicated
/// representation so twisted kernels can be precomputed once per time step.
#[derive(Clone, Debug)]
pub enum TransitionKernel {
    Linear(LinearTransition),
    Mixture(Arc<dyn MixtureTransition>),
}

impl TransitionKernel {
    pub fn dim(&self) -> usize {
        match self {
            TransitionKernel::Linear(l) => l.cov.dim(),
            TransitionKernel::Mixture(m) => m.dim(),
        }
    }

    /// The mixture components of `f(x, ·)`.
    pub fn components(&self, x: &[f64]) -> Vec<GaussianComponent> {
        match self {
            TransitionKernel::Linear(l) => {
                let mut mean = DVector::zeros(l.cov.dim());
                l.mean_into(x, mean.as_mut_slice());
                vec![GaussianComponent {
                    mean,
                    cov: l.cov.clone(),
                    log_weight: 0.0,
                }]
            }
            TransitionKernel::Mixture(m) => m.components(x),
        }
    }

    /// `log f(x, x_next)`.
    pub fn log_density(&self, x: &[f64], x_next: &[f64], scratch: &mut Vec<f64>) -> f64 {
        match self {
            TransitionKernel::Linear(l) => {
                let mut mean = vec![0.0; x.len()];
                l.mean_into(x, &mut mean);
                l.cov.log_density(x_next, &mean, scratch)
            }
            TransitionKernel::Mixture(m) => {
                let terms: Vec<f64> = m
                    .components(x)
                    .iter()
                    .map(|c| c.log_weight + c.log_density(x_next, scratch))
                    .collect();
                log_sum_exp(&terms)
            }
        }
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        match self {
            TransitionKernel::Linear(l) => {
                let mut mean = vec![0.0; x.len()];
                l.mean_into(x, &mut mean);
                l.cov.sample_into(&mean, rng, out);
            }
            TransitionKernel::Mixture(m) => {
                let mix = GaussianMixture::new(m.components(x)).expect("transition mixture weights");
                mix.sample_into(rng, out);
            }
        }
    }
}

/// Two-or-more-regime kernel with softmax weights:
/// `c_k(x) ∝ exp(slope_k · x + intercept_k)`, `a_k(x) = M_k x + o_k`, fixed
/// covariances.
#[derive(Clone, Debug)]
pub struct SoftmaxMixtureTransition {
    pub slopes: Vec<DVector<f64>>,
    pub intercepts: Vec<f64>,
    pub maps: Vec<DMatrix<f64>>,
    pub offsets: Vec<DVector<f64>>,
    pub covs: Vec<Covariance>,
}

impl SoftmaxMixtureTransition {
    pub fn new(
        slopes: Vec<DVector<f64>>,
        intercepts: Vec<f64>,
        maps: Vec<DMatrix<f64>>,
        offsets: Vec<DVector<f64>>,
        covs: Vec<Covariance>,
    ) -> Result<Self, ModelError> {
        let k = covs.len();
        if k == 0 {
            return Err(ModelError::InvalidParameter("mixture kernel needs a component".into()));
        }
        let d = covs[0].dim();
        check_dim("mixture slopes", k, slopes.len())?;
        check_dim("mixture intercepts", k, intercepts.len())?;
        check_dim("mixture maps", k, maps.len())?;
        check_dim("mixture offsets", k, offsets.len())?;
        for i in 0..k {
            check_dim("mixture covariance", d, covs[i].dim())?;
            check_dim("mixture slope", d, slopes[i].len())?;
            check_dim("mixture offset", d, offsets[i].len())?;
            check_dim("mixture map rows", d, maps[i].nrows())?;
            check_dim("mixture map columns", d, maps[i].ncols())?;
        }
        Ok(Self {
            slopes,
            intercepts,
            maps,
            offsets,
            covs,
        })
    }
}

impl MixtureTransition for SoftmaxMixtureTransition {
    fn dim(&self) -> usize {
        self.covs[0].dim()
    }

    fn components(&self, x: &[f64]) -> Vec<GaussianComponent> {
        let xv = DVector::from_column_slice(x);
        let logits: Vec<f64> = self
            .slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(s, b)| s.dot(&xv) + b)
            .collect();
        let norm = log_sum_exp(&logits);
        (0..self.covs.len())
            .map(|k| GaussianComponent {
                mean: &self.maps[k] * &xv + &self.offsets[k],
                cov: self.covs[k].clone(),
                log_weight: logits[k] - norm,
            })
            .collect()
    }
}

/// `exp(-½ xᵀJx + hᵀx + c)`: a Gaussian-shaped function of the state in
/// information form. `J` may be singular.
#[derive(Clone, Debug)]
pub struct InfoGaussian {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
    pub log_const: f64,
}

impl InfoGaussian {
    /// The constant function 1.
    pub fn one(dim: usize) -> Self {
        Self {
            precision: DMatrix::zeros(dim, dim),
            shift: DVector::zeros(dim),
            log_const: 0.0,
        }
    }

    pub fn log_eval(&self, x: &DVector<f64>) -> f64 {
        -0.5 * (x.transpose() * &self.precision * x)[(0, 0)] + self.shift.dot(x) + self.log_const
    }

    pub fn multiply(&self, other: &InfoGaussian) -> InfoGaussian {
        InfoGaussian {
            precision: &self.precision + &other.precision,
            shift: &self.shift + &other.shift,
            log_const: self.log_const + other.log_const,
        }
    }

    /// Rewrites as `exp(log_weight)·𝒩(x; mean, cov)`; needs `J` positive definite.
    pub fn to_moment_form(&self) -> Result<GaussianComponent, MathError> {
        let j = (&self.precision + self.precision.transpose()) * 0.5;
        let chol = j.clone().cholesky().ok_or(MathError::NotPositiveDefinite)?;
        let cov = chol.inverse();
        let cov = (&cov + cov.transpose()) * 0.5;
        let mean = chol.solve(&self.shift);
        let log_det_j = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.shift.len() as f64;
        let log_weight = self.log_const + 0.5 * self.shift.dot(&mean) + 0.5 * d * LN_2PI - 0.5 * log_det_j;
        GaussianComponent::new(mean, Covariance::from_matrix(cov)?, log_weight)
    }
}

/// `g(x, y)` as an opaque pointwise log-evaluator.
pub trait ObservationDensity: Send + Sync + Debug {
    fn dim_state(&self) -> usize;
    fn dim_obs(&self) -> usize;
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64;
    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> DVector<f64>;

    /// `x ↦ g(x, y)` in information form, when it is Gaussian-shaped in `x`.
    fn gaussian_in_state(&self, _y: &[f64]) -> Option<InfoGaussian> {
        None
    }
}

/// `g(x, y) = 𝒩(y; Cx, D)`.
#[derive(Clone, Debug)]
pub struct LinearGaussianObservation {
    pub c: DMatrix<f64>,
    pub d: Covariance,
}

impl ObservationDensity for LinearGaussianObservation {
    fn dim_state(&self) -> usize {
        self.c.ncols()
    }

    fn dim_obs(&self) -> usize {
        self.c.nrows()
    }

    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut mean = vec![0.0; y.len()];
        for (i, m) in mean.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, xj) in x.iter().enumerate() {
                acc += self.c[(i, j)] * xj;
            }
            *m = acc;
        }
        let mut scratch = Vec::with_capacity(y.len());
        self.d.log_density(y, &mean, &mut scratch)
    }

    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> DVector<f64> {
        let mean = &self.c * DVector::from_column_slice(x);
        let mut out = DVector::zeros(self.dim_obs());
        self.d.sample_into(mean.as_slice(), rng, out.as_mut_slice());
        out
    }

    fn gaussian_in_state(&self, y: &[f64]) -> Option<InfoGaussian> {
        let dinv = self.d.to_matrix().try_inverse()?;
        let yv = DVector::from_column_slice(y);
        let ct_dinv = self.c.transpose() * &dinv;
        let precision = &ct_dinv * &self.c;
        let shift = &ct_dinv * &yv;
        let log_const =
            -0.5 * (yv.dot(&(&dinv * &yv)) + y.len() as f64 * LN_2PI + self.d.log_det());
        Some(InfoGaussian {
            precision,
            shift,
            log_const,
        })
    }
}

/// `g(x, y) = 𝒩(y; 0, β² exp(x))`, scalar state and observation.
#[derive(Clone, Debug)]
pub struct UnivariateSvObservation {
    pub beta: f64,
}

impl ObservationDensity for UnivariateSvObservation {
    fn dim_state(&self) -> usize {
        1
    }

    fn dim_obs(&self) -> usize {
        1
    }

    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let log_var = 2.0 * self.beta.ln() + x[0];
        -0.5 * (LN_2PI + log_var + y[0] * y[0] * (-log_var).exp())
    }

    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> DVector<f64> {
        let z: f64 = rng.sample(StandardNormal);
        DVector::from_element(1, self.beta * (0.5 * x[0]).exp() * z)
    }
}

/// `g(x, y) = Π_i 𝒩(y_i; 0, exp(x_i))`.
#[derive(Clone, Debug)]
pub struct MultivariateSvObservation {
    pub dim: usize,
}

impl ObservationDensity for MultivariateSvObservation {
    fn dim_state(&self) -> usize {
        self.dim
    }

    fn dim_obs(&self) -> usize {
        self.dim
    }

    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| -0.5 * (LN_2PI + xi + yi * yi * (-xi).exp()))
            .sum()
    }

    fn sample(&self, x: &[f64], rng: &mut dyn RngCore) -> DVector<f64> {
        DVector::from_iterator(
            self.dim,
            x.iter().map(|xi| {
                let z: f64 = rng.sample(StandardNormal);
                (0.5 * xi).exp() * z
            }),
        )
    }
}

/// Parameters of a linear-Gaussian model, kept for the Kalman oracle and the
/// closed-form optimal twisting sequence.
#[derive(Clone, Debug)]
pub struct LinearGaussianParams {
    pub m: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// The `(μ, f, g)` triple of a time-homogeneous HMM.
#[derive(Clone, Debug)]
pub struct StateSpaceModel {
    initial: GaussianMixture,
    transition: TransitionKernel,
    observation: Arc<dyn ObservationDensity>,
    linear_gaussian: Option<LinearGaussianParams>,
}

impl StateSpaceModel {
    pub fn new(
        initial: GaussianMixture,
        transition: TransitionKernel,
        observation: Arc<dyn ObservationDensity>,
    ) -> Result<Self, ModelError> {
        let d = initial.dim();
        check_dim("transition dimension", d, transition.dim())?;
        check_dim("observation state dimension", d, observation.dim_state())?;
        if observation.dim_obs() == 0 {
            return Err(ModelError::InvalidParameter("observation dimension must be positive".into()));
        }
        Ok(Self {
            initial,
            transition,
            observation,
            linear_gaussian: None,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.initial.dim()
    }

    pub fn dim_obs(&self) -> usize {
        self.observation.dim_obs()
    }

    pub fn initial(&self) -> &GaussianMixture {
        &self.initial
    }

    pub fn transition(&self) -> &TransitionKernel {
        &self.transition
    }

    pub fn observation(&self) -> &Arc<dyn ObservationDensity> {
        &self.observation
    }

    pub fn linear_gaussian(&self) -> Option<&LinearGaussianParams> {
        self.linear_gaussian.as_ref()
    }

    /// Draws a latent path and observations of length `len`.
    pub fn simulate<R: Rng>(&self, len: usize, rng: &mut R) -> (Vec<DVector<f64>>, Observations) {
        let d = self.dim_state();
        let mut states = Vec::with_capacity(len);
        let mut rows = Vec::with_capacity(len);
        let mut x = DVector::zeros(d);
        for t in 0..len {
            if t == 0 {
                self.initial.sample_into(rng, x.as_mut_slice());
            } else {
                let prev = x.clone();
                self.transition.sample_into(prev.as_slice(), rng, x.as_mut_slice());
            }
            rows.push(self.observation.sample(x.as_slice(), rng));
            states.push(x.clone());
        }
        let obs = Observations::from_rows(&rows).expect("simulated rows are consistent");
        (states, obs)
    }

    pub fn bind(&self, observations: Observations) -> Result<HmmModel, ModelError> {
        check_dim("observation row length", self.dim_obs(), observations.dim())?;
        Ok(HmmModel {
            space: self.clone(),
            observations,
        })
    }
}

/// Observation record `y_{0..T}`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    dim: usize,
    data: Vec<f64>,
}

impl Observations {
    pub fn from_rows(rows: &[DVector<f64>]) -> Result<Self, ModelError> {
        let Some(first) = rows.first() else {
            return Err(ModelError::InvalidParameter("at least one observation is required".into()));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(ModelError::InvalidParameter("observation rows must be non-empty".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            check_dim("observation row length", dim, r.len())?;
            data.extend(r.iter());
        }
        Ok(Self { dim, data })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(ModelError::InvalidParameter(format!(
                "{} values cannot form rows of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// Reads comma-separated decimal rows; a first line that does not parse
    /// as numbers is treated as a header.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows: Vec<DVector<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Csv(e.to_string()))?;
            let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(v) => rows.push(DVector::from_vec(v)),
                Err(_) if line == 0 => continue,
                Err(e) => return Err(ModelError::Csv(format!("line {}: {e}", line + 1))),
            }
        }
        Self::from_rows(&rows)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::new();
        for t in 0..self.len() {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Mean-corrected percentage log-returns `y_t = 100·(log r_{t+1} - log r_t - mean)`
/// of a single price series.
pub fn mean_corrected_returns(prices: &[f64]) -> Result<Vec<f64>, ModelError> {
    if prices.len() < 2 || prices.iter().any(|p| !(*p > 0.0)) {
        return Err(ModelError::InvalidParameter(
            "need at least two positive prices".into(),
        ));
    }
    let r: Vec<f64> = prices.windows(2).map(|w| (w[1] / w[0]).ln()).collect();
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    Ok(r.iter().map(|v| 100.0 * (v - mean)).collect())
}

/// A model together with its bound observation record.
#[derive(Clone, Debug)]
pub struct HmmModel {
    space: StateSpaceModel,
    observations: Observations,
}

impl HmmModel {
    pub fn space(&self) -> &StateSpaceModel {
        &self.space
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    pub fn dim_state(&self) -> usize {
        self.space.dim_state()
    }

    pub fn dim_obs(&self) -> usize {
        self.space.dim_obs()
    }

    /// Number of time steps `T`.
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn initial(&self) -> &GaussianMixture {
        self.space.initial()
    }

    pub fn transition(&self) -> &TransitionKernel {
        self.space.transition()
    }

    pub fn linear_gaussian(&self) -> Option<&LinearGaussianParams> {
        self.space.linear_gaussian()
    }

    /// `log g(x, y_t)`.
    pub fn log_g(&self, t: usize, x: &[f64]) -> f64 {
        self.space.observation.log_density(x, self.observations.row(t))
    }

    /// `x ↦ g(x, y_t)` in information form, if Gaussian-shaped in `x`.
    pub fn observation_in_state(&self, t: usize) -> Option<InfoGaussian> {
        self.space.observation.gaussian_in_state(self.observations.row(t))
    }
}

/// `log f(x, ψ) = log Σ_k c_k(x) ∫ 𝒩(u; a_k(x), b_k(x)) ψ(u) du`.
pub fn log_transition_apply_psi(
    kernel: &TransitionKernel,
    x: &[f64],
    psi: &PsiFunction,
) -> Result<f64, ModelError> {
    check_dim("state", kernel.dim(), x.len())?;
    check_dim("psi dimension", kernel.dim(), psi.dim())?;
    let terms: Result<Vec<f64>, MathError> = kernel
        .components(x)
        .iter()
        .map(|c| Ok(c.log_weight + log_component_psi_integral(c, psi)?))
        .collect();
    Ok(log_sum_exp(&terms?))
}

/// Evaluates `x ↦ log f(x, ψ)` repeatedly for one `ψ`; for a linear kernel the
/// covariance sums `B + P_j` are factorized once.
#[derive(Clone, Debug)]
pub struct PsiApplier<'a> {
    kernel: &'a TransitionKernel,
    psi: &'a PsiFunction,
    sums: Vec<Covariance>,
}

impl<'a> PsiApplier<'a> {
    pub fn new(kernel: &'a TransitionKernel, psi: &'a PsiFunction) -> Result<Self, ModelError> {
        check_dim("psi dimension", kernel.dim(), psi.dim())?;
        let sums = match kernel {
            TransitionKernel::Linear(lin) => psi
                .components()
                .iter()
                .map(|c| lin.cov.add(&c.cov))
                .collect::<Result<_, _>>()?,
            TransitionKernel::Mixture(_) => Vec::new(),
        };
        Ok(Self { kernel, psi, sums })
    }

    pub fn log_apply(&self, x: &[f64], mean: &mut Vec<f64>, scratch: &mut Vec<f64>) -> f64 {
        if self.psi.is_constant() {
            return self.psi.log_scale() + self.psi.constant().ln();
        }
        match self.kernel {
            TransitionKernel::Linear(lin) => {
                mean.resize(x.len(), 0.0);
                lin.mean_into(x, mean);
                let mut terms = Vec::with_capacity(self.sums.len() + 1);
                if self.psi.constant() > 0.0 {
                    terms.push(self.psi.constant().ln());
                }
                for (s, c) in self.sums.iter().zip(self.psi.components()) {
                    terms.push(c.log_weight + s.log_density(mean, c.mean.as_slice(), scratch));
                }
                self.psi.log_scale() + log_sum_exp(&terms)
            }
            TransitionKernel::Mixture(_) => {
                log_transition_apply_psi(self.kernel, x, self.psi).expect("dimensions checked at construction")
            }
        }
    }
}

/// `f(x, ψ) = ∫ f(x, x') ψ(x') dx'`.
pub fn transition_apply_psi(model: &HmmModel, x: &DVector<f64>, psi: &PsiFunction) -> Result<f64, ModelError> {
    log_transition_apply_psi(model.transition(), x.as_slice(), psi).map(f64::exp)
}

/// `A_ij = α^{|i-j|+1}`.
pub fn banded_power_matrix(dim: usize, alpha: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| alpha.powi((i as i32 - j as i32).abs() + 1))
}

/// Linear-Gaussian model `μ = 𝒩(m, Σ)`, `f(x,·) = 𝒩(Ax, B)`, `g(x,·) = 𝒩(Cx, D)`.
///
/// `C` is `d' × d`.
pub fn build_linear_gaussian(
    m: DVector<f64>,
    sigma: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
) -> Result<StateSpaceModel, ModelError> {
    let dim = m.len();
    if dim == 0 {
        return Err(ModelError::InvalidParameter("state dimension must be positive".into()));
    }
    check_dim("Sigma rows", dim, sigma.nrows())?;
    check_dim("A rows", dim, a.nrows())?;
    check_dim("A columns", dim, a.ncols())?;
    check_dim("B rows", dim, b.nrows())?;
    check_dim("C columns", dim, c.ncols())?;
    let dim_obs = c.nrows();
    if dim_obs == 0 {
        return Err(ModelError::InvalidParameter("observation dimension must be positive".into()));
    }
    check_dim("D rows", dim_obs, d.nrows())?;
    let initial = GaussianMixture::single(m.clone(), Covariance::from_matrix(sigma.clone())?)?;
    let transition = LinearTransition::new(a.clone(), DVector::zeros(dim), Covariance::from_matrix(b.clone())?)?;
    let observation = LinearGaussianObservation {
        c: c.clone(),
        d: Covariance::from_matrix(d.clone())?,
    };
    let mut model = StateSpaceModel::new(initial, TransitionKernel::Linear(transition), Arc::new(observation))?;
    model.linear_gaussian = Some(LinearGaussianParams { m, sigma, a, b, c, d });
    Ok(model)
}

/// The family `m = 0`, `Σ = B = C = D = I_d`, `A_ij = α^{|i-j|+1}`.
pub fn build_banded_linear_gaussian(dim: usize, alpha: f64) -> Result<StateSpaceModel, ModelError> {
    let id = DMatrix::identity(dim, dim);
    build_linear_gaussian(
        DVector::zeros(dim),
        id.clone(),
        banded_power_matrix(dim, alpha),
        id.clone(),
        id.clone(),
        id,
    )
}

fn univariate_sv(alpha: f64, sigma: f64, beta: f64, initial_var: f64) -> Result<StateSpaceModel, ModelError> {
    let initial = GaussianMixture::single(DVector::zeros(1), Covariance::scalar(initial_var)?)?;
    let transition = LinearTransition::new(
        DMatrix::from_element(1, 1, alpha),
        DVector::zeros(1),
        Covariance::scalar(sigma * sigma)?,
    )?;
    StateSpaceModel::new(
        initial,
        TransitionKernel::Linear(transition),
        Arc::new(UnivariateSvObservation { beta }),
    )
}

fn check_sv_params(alpha: f64, sigma: f64, beta: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(ModelError::InvalidParameter(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(beta > 0.0 && beta.is_finite()) {
        return Err(ModelError::InvalidParameter("sigma and beta must be positive".into()));
    }
    Ok(())
}

/// Univariate stochastic volatility model with initial variance
/// `σ²/(1-α)²` and `f(x,·) = 𝒩(αx, σ²)`, `g(x,·) = 𝒩(0, β² eˣ)`.
pub fn build_univariate_sv(alpha: f64, sigma: f64, beta: f64) -> Result<StateSpaceModel, ModelError> {
    check_sv_params(alpha, sigma, beta)?;
    univariate_sv(alpha, sigma, beta, sigma * sigma / ((1.0 - alpha) * (1.0 - alpha)))
}

/// As [`build_univariate_sv`] but started from the stationary law of the
/// AR(1) chain, variance `σ²/(1-α²)`.
pub fn build_univariate_sv_stationary(alpha: f64, sigma: f64, beta: f64) -> Result<StateSpaceModel, ModelError> {
    check_sv_params(alpha, sigma, beta)?;
    univariate_sv(alpha, sigma, beta, sigma * sigma / (1.0 - alpha * alpha))
}

/// `U⋆_ij = U_ij / (1 - φ_i φ_j)`, the stationary covariance of
/// `x' = m + diag(φ)(x - m) + ε`, `ε ~ 𝒩(0, U)`.
pub fn stationary_covariance(phi: &DVector<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] / (1.0 - phi[i] * phi[j]))
}

/// Multivariate stochastic volatility model.
pub fn build_multivariate_sv(m: DVector<f64>, phi: DVector<f64>, u: DMatrix<f64>) -> Result<StateSpaceModel, ModelError> {
    let dim = m.len();
    if dim == 0 {
        return Err(ModelError::InvalidParameter("state dimension must be positive".into()));
    }
    check_dim("phi", dim, phi.len())?;
    check_dim("U rows", dim, u.nrows())?;
    check_dim("U columns", dim, u.ncols())?;
    if let Some(p) = phi.iter().find(|p| !(p.abs() < 1.0)) {
        return Err(ModelError::InvalidParameter(format!("|phi_i| must be < 1, got {p}")));
    }
    let u_star = stationary_covariance(&phi, &u);
    let initial = GaussianMixture::single(m.clone(), Covariance::from_matrix(u_star)?)?;
    let offset = m.zip_map(&phi, |mi, p| (1.0 - p) * mi);
    let transition = LinearTransition::new(DMatrix::from_diagonal(&phi), offset, Covariance::from_matrix(u)?)?;
    StateSpaceModel::new(
        initial,
        TransitionKernel::Linear(transition),
        Arc::new(MultivariateSvObservation { dim }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;
    use nalgebra::{dmatrix, dvector};

    fn initial_var(model: &StateSpaceModel) -> f64 {
        model.initial().components()[0].cov.to_matrix()[(0, 0)]
    }

    #[test]
    fn banded_matrix_example() {
        let a = banded_power_matrix(2, 0.5);
        assert_eq!(a, dmatrix![0.5, 0.25; 0.25, 0.5]);
    }

    #[test]
    fn linear_gaussian_shape_errors() {
        let id = DMatrix::identity(2, 2);
        let bad_c = DMatrix::identity(2, 3);
        assert!(build_linear_gaussian(DVector::zeros(2), id.clone(), id.clone(), id.clone(), bad_c, id.clone()).is_err());
        let not_pd = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(build_linear_gaussian(DVector::zeros(2), not_pd, id.clone(), id.clone(), id.clone(), id).is_err());
    }

    #[test]
    fn sv_initial_variance() {
        let m = build_univariate_sv(0.95, 0.02f64.sqrt(), 0.5).unwrap();
        assert!((initial_var(&m) - 8.0).abs() < 1e-9);
        let m = build_univariate_sv(0.0, 0.3, 0.5).unwrap();
        assert!((initial_var(&m) - 0.09).abs() < 1e-15);
        assert!(build_univariate_sv(1.0, 0.3, 0.5).is_err());
        assert!(build_univariate_sv(0.5, 0.0, 0.5).is_err());
        let s = build_univariate_sv_stationary(0.5, 1.0, 0.5).unwrap();
        assert!((initial_var(&s) - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn msv_stationary_covariance_fixed_point() {
        // Oracle: iterate U⋆ ← ΦU⋆Φ + U to convergence.
        let phi = dvector![0.5];
        let u = dmatrix![0.75];
        let mut p: DMatrix<f64> = DMatrix::zeros(1, 1);
        for _ in 0..200 {
            p = DMatrix::from_diagonal(&phi) * &p * DMatrix::from_diagonal(&phi) + &u;
        }
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12);
        let m = build_multivariate_sv(dvector![0.0], phi, u.clone()).unwrap();
        assert!((initial_var(&m) - 1.0).abs() < 1e-12);

        let m0 = build_multivariate_sv(dvector![0.0], dvector![0.0], u).unwrap();
        assert!((initial_var(&m0) - 0.75).abs() < 1e-15);
        assert!(build_multivariate_sv(dvector![0.0, 0.0], dvector![1.0, 0.2], DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn msv_stationary_identity_dense() {
        let phi = dvector![0.9, -0.3, 0.6];
        let u = dmatrix![1.0, 0.3, 0.0; 0.3, 0.5, 0.1; 0.0, 0.1, 0.8];
        let s = stationary_covariance(&phi, &u);
        let p = DMatrix::from_diagonal(&phi);
        let resid = &s - &p * &s * &p - &u;
        assert!(resid.amax() < 1e-10);
    }

    #[test]
    fn csv_with_and_without_header() {
        let with = "a,b\n1.0,2.0\n3.5,-1\n";
        let o = Observations::from_csv_reader(with.as_bytes()).unwrap();
        assert_eq!(o.len(), 2);
        assert_eq!(o.row(1), &[3.5, -1.0]);
        let without = "1.0\n2.0\n";
        let o = Observations::from_csv_reader(without.as_bytes()).unwrap();
        assert_eq!((o.len(), o.dim()), (2, 1));
        assert!(Observations::from_csv_reader("1,2\n3\n".as_bytes()).is_err());
        assert!(Observations::from_csv_reader("1,2\nx,3\n".as_bytes()).is_err());
    }

    #[test]
    fn returns_helper() {
        let y = mean_corrected_returns(&[1.0, 2.0, 4.0]).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12));
        assert!(mean_corrected_returns(&[1.0]).is_err());
    }

    #[test]
    fn simulate_and_bind() {
        let space = build_banded_linear_gaussian(3, 0.42).unwrap();
        let (states, obs) = space.simulate(10, &mut rng_from_seed(1));
        assert_eq!(states.len(), 10);
        let model = space.bind(obs).unwrap();
        assert_eq!(model.len(), 10);
        assert!(model.log_g(3, states[3].as_slice()).is_finite());
        let wrong = Observations::from_flat(2, vec![0.0; 4]).unwrap();
        assert!(space.bind(wrong).is_err());
    }

    #[test]
    fn info_form_of_linear_observation_matches_density() {
        let obs = LinearGaussianObservation {
            c: dmatrix![1.0, 0.5; -0.3, 2.0],
            d: Covariance::dense(dmatrix![0.5, 0.1; 0.1, 0.4]).unwrap(),
        };
        let y = [0.7, -1.2];
        let info = obs.gaussian_in_state(&y).unwrap();
        for x in [dvector![0.0, 0.0], dvector![1.0, -2.0], dvector![3.0, 0.5]] {
            let direct = obs.log_density(x.as_slice(), &y);
            assert!((info.log_eval(&x) - direct).abs() < 1e-10);
        }
        let comp = info.to_moment_form().unwrap();
        let x = dvector![0.3, 0.9];
        let mut s = Vec::new();
        let via_moment = comp.log_weight + comp.log_density(x.as_slice(), &mut s);
        assert!((via_moment - info.log_eval(&x)).abs() < 1e-10);
    }

    #[test]
    fn softmax_kernel_weights_sum_to_one() {
        let k = SoftmaxMixtureTransition::new(
            vec![dvector![1.0], dvector![-0.5]],
            vec![0.0, 0.3],
            vec![dmatrix![0.9], dmatrix![0.2]],
            vec![dvector![0.0], dvector![1.0]],
            vec![Covariance::scalar(0.5).unwrap(), Covariance::scalar(2.0).unwrap()],
        )
        .unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let x: f64 = rng.sample::<f64, _>(StandardNormal) * 3.0;
            let s: f64 = k.components(&[x]).iter().map(|c| c.log_weight.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
