//! Particle marginal Metropolis–Hastings with pluggable likelihood estimators
//! and chain diagnostics.

use std::cell::Cell;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::filter::{run_bpf, FilterConfig};
use crate::hmm::{HmmModel, ModelError};
use crate::iapf::{run_iapf, IapfConfig};
use crate::oracle::kalman_log_likelihood;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("initial parameter is outside the prior support")]
    InitialOutsideSupport,
    #[error("model construction failed at the initial parameter: {0}")]
    InitialModel(#[source] ModelError),
    #[error("likelihood estimate failed at the initial parameter: {0}")]
    InitialEstimate(String),
    #[error("autocorrelation needs at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("sequence has zero variance")]
    ConstantSequence,
}

/// Prior densities on a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorKind {
    Uniform { lo: f64, hi: f64 },
    /// Density `∝ x^{-shape-1} e^{-scale/x}` on `x > 0`.
    InverseGamma { shape: f64, scale: f64 },
    Beta { a: f64, b: f64 },
    /// Density `1 − |x|` on `[−1, 1]`.
    SymmetricTriangular,
    Flat,
}

impl PriorKind {
    pub fn log_density(&self, x: f64) -> f64 {
        if !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorKind::Uniform { lo, hi } => {
                if (lo..=hi).contains(&x) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorKind::InverseGamma { shape, scale } => {
                if x > 0.0 {
                    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorKind::Beta { a, b } => {
                if x > 0.0 && x < 1.0 {
                    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorKind::SymmetricTriangular => {
                if x.abs() < 1.0 {
                    (1.0 - x.abs()).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorKind::Flat => 0.0,
        }
    }
}

/// How the chain coordinate maps to the prior's argument.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Identity,
    /// The prior is on `θ²` for `θ > 0`; the density picks up the Jacobian `2θ`.
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Prior {
    pub kind: PriorKind,
    pub transform: Transform,
}

impl Prior {
    pub fn new(kind: PriorKind) -> Self {
        Self { kind, transform: Transform::Identity }
    }

    pub fn on_square(kind: PriorKind) -> Self {
        Self { kind, transform: Transform::Square }
    }

    pub fn log_density(&self, theta: f64) -> f64 {
        match self.transform {
            Transform::Identity => self.kind.log_density(theta),
            Transform::Square => {
                if theta > 0.0 {
                    self.kind.log_density(theta * theta) + (2.0 * theta).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

pub fn log_prior(priors: &[Prior], theta: &[f64]) -> f64 {
    priors.iter().zip(theta).map(|(p, x)| p.log_density(*x)).sum()
}

/// An unbiased, non-negative estimator of the likelihood, reported on the
/// log scale.
pub trait LikelihoodEstimator {
    fn log_likelihood(&self, model: &HmmModel, seed: u64) -> Result<f64, String>;
}

#[derive(Clone, Debug, PartialEq)]
pub enum Estimator {
    Bpf { n_particles: usize, kappa: f64 },
    Iapf(IapfConfig),
    Kalman,
}

impl LikelihoodEstimator for Estimator {
    fn log_likelihood(&self, model: &HmmModel, seed: u64) -> Result<f64, String> {
        match self {
            Estimator::Bpf { n_particles, kappa } => {
                let config = FilterConfig { n_particles: *n_particles, kappa: *kappa, seed, record_ancestry: false };
                run_bpf(model, &config).map(|o| o.log_z()).map_err(|e| e.to_string())
            }
            Estimator::Iapf(config) => {
                let config = IapfConfig { seed, ..config.clone() };
                run_iapf(model, &config).map(|r| r.log_z).map_err(|e| e.to_string())
            }
            Estimator::Kalman => kalman_log_likelihood(model).map(|k| k.log_likelihood).map_err(|e| e.to_string()),
        }
    }
}

/// Wraps an estimator and counts its invocations.
pub struct CountingEstimator<E> {
    pub inner: E,
    calls: Cell<usize>,
}

impl<E> CountingEstimator<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<E: LikelihoodEstimator> LikelihoodEstimator for CountingEstimator<E> {
    fn log_likelihood(&self, model: &HmmModel, seed: u64) -> Result<f64, String> {
        self.calls.set(self.calls.get() + 1);
        self.inner.log_likelihood(model, seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhConfig {
    /// Number of single-component updates.
    pub chain_length: usize,
    pub proposal_sd: Vec<f64>,
    pub estimator: Estimator,
    pub seed: u64,
}

impl MhConfig {
    pub fn validate(&self, dim: usize) -> Result<(), InferenceError> {
        if self.chain_length == 0 {
            return Err(InferenceError::InvalidConfig("chain length must be at least 1".into()));
        }
        if self.proposal_sd.len() != dim {
            return Err(InferenceError::InvalidConfig(format!(
                "{} proposal scales for {dim} parameters",
                self.proposal_sd.len()
            )));
        }
        if self.proposal_sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(InferenceError::InvalidConfig("proposal scales must be positive".into()));
        }
        Ok(())
    }
}

/// Seed stream for the initial estimate.
const INITIAL_STREAM: u64 = u64::MAX;
/// Seed stream for proposals and acceptance draws.
const PROPOSAL_STREAM: u64 = u64::MAX - 1;

/// `min(1, exp(Δ log Ẑ + Δ log prior))` for a symmetric proposal.
pub fn acceptance_probability(log_z_proposed: f64, log_z_current: f64, log_prior_proposed: f64, log_prior_current: f64) -> f64 {
    let log_ratio = (log_z_proposed - log_z_current) + (log_prior_proposed - log_prior_current);
    if log_ratio.is_nan() {
        return 0.0;
    }
    log_ratio.min(0.0).exp()
}

/// State after each step, one row per component update.
#[derive(Clone, Debug)]
pub struct Chain {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    /// Cached `log Ẑ` of the state after each step.
    pub log_z: Vec<f64>,
    pub proposed: Vec<usize>,
    pub accepted: Vec<usize>,
    /// Proposals rejected because the estimator or the model builder failed.
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainSummary {
    pub names: Vec<String>,
    pub chain_length: usize,
    pub acceptance_rates: Vec<f64>,
    pub posterior_means: Vec<f64>,
    pub iact: Vec<Option<f64>>,
    pub adjusted_sample_sizes: Vec<Option<f64>>,
    pub mcse: Vec<Option<f64>>,
    pub failures: usize,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[j]).collect()
    }

    pub fn acceptance_rates(&self) -> Vec<f64> {
        self.accepted
            .iter()
            .zip(&self.proposed)
            .map(|(a, p)| if *p == 0 { 0.0 } else { *a as f64 / *p as f64 })
            .collect()
    }

    /// Header `step,<names>,log_z` and one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for n in &self.names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",log_z\n");
        for (i, (row, lz)) in self.samples.iter().zip(&self.log_z).enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(&lz.to_string());
            out.push('\n');
        }
        out
    }

    /// Diagnostics per component; autocorrelation entries are `None` when the
    /// column is too short or constant.
    pub fn summary(&self) -> ChainSummary {
        let mut means = Vec::new();
        let mut iacts = Vec::new();
        let mut sizes = Vec::new();
        let mut mcses = Vec::new();
        for j in 0..self.dim() {
            let col = self.column(j);
            let n = col.len() as f64;
            let mean = col.iter().sum::<f64>() / n;
            means.push(mean);
            let tau = iact(&col).ok();
            iacts.push(tau);
            sizes.push(tau.map(|t| n / t));
            mcses.push(tau.map(|t| {
                let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                (var * t / n).sqrt()
            }));
        }
        ChainSummary {
            names: self.names.clone(),
            chain_length: self.len(),
            acceptance_rates: self.acceptance_rates(),
            posterior_means: means,
            iact: iacts,
            adjusted_sample_sizes: sizes,
            mcse: mcses,
            failures: self.failures,
        }
    }
}

/// [`run_pmmh_with`] using the estimator named in the configuration.
pub fn run_pmmh<B>(builder: B, priors: &[Prior], names: &[&str], theta0: &[f64], config: &MhConfig) -> Result<Chain, InferenceError>
where
    B: Fn(&[f64]) -> Result<HmmModel, ModelError>,
{
    run_pmmh_with(builder, priors, names, theta0, config, &config.estimator)
}

/// Component-wise Gaussian random-walk PMMH. Step `s` updates component
/// `s mod p`; its estimator call uses seed `derive_seed(seed, s)`. The
/// current-state estimate is never refreshed.
pub fn run_pmmh_with<B, E>(
    builder: B,
    priors: &[Prior],
    names: &[&str],
    theta0: &[f64],
    config: &MhConfig,
    estimator: &E,
) -> Result<Chain, InferenceError>
where
    B: Fn(&[f64]) -> Result<HmmModel, ModelError>,
    E: LikelihoodEstimator + ?Sized,
{
    let p = theta0.len();
    if priors.len() != p || names.len() != p {
        return Err(InferenceError::InvalidConfig(format!(
            "{} priors and {} names for {p} parameters",
            priors.len(),
            names.len()
        )));
    }
    config.validate(p)?;
    let mut lp = log_prior(priors, theta0);
    if lp == f64::NEG_INFINITY || lp.is_nan() {
        return Err(InferenceError::InitialOutsideSupport);
    }
    let model = builder(theta0).map_err(InferenceError::InitialModel)?;
    let mut lz = estimator
        .log_likelihood(&model, derive_seed(config.seed, INITIAL_STREAM))
        .map_err(InferenceError::InitialEstimate)?;
    if !lz.is_finite() {
        return Err(InferenceError::InitialEstimate(format!("non-finite estimate {lz}")));
    }

    let mut rng = rng_from_seed(derive_seed(config.seed, PROPOSAL_STREAM));
    let mut theta = theta0.to_vec();
    let mut chain = Chain {
        names: names.iter().map(|s| s.to_string()).collect(),
        samples: Vec::with_capacity(config.chain_length),
        log_z: Vec::with_capacity(config.chain_length),
        proposed: vec![0; p],
        accepted: vec![0; p],
        failures: 0,
    };
    for step in 0..config.chain_length {
        let j = step % p;
        let z: f64 = rng.sample(StandardNormal);
        let u: f64 = rng.random();
        let mut proposal = theta.clone();
        proposal[j] += config.proposal_sd[j] * z;
        chain.proposed[j] += 1;
        let lp_new = log_prior(priors, &proposal);
        if lp_new != f64::NEG_INFINITY && !lp_new.is_nan() {
            let estimate = match builder(&proposal) {
                Ok(m) => estimator.log_likelihood(&m, derive_seed(config.seed, step as u64)),
                Err(e) => Err(e.to_string()),
            };
            match estimate {
                Ok(lz_new) if !lz_new.is_nan() => {
                    if u < acceptance_probability(lz_new, lz, lp_new, lp) {
                        theta = proposal;
                        lz = lz_new;
                        lp = lp_new;
                        chain.accepted[j] += 1;
                    }
                }
                Ok(_) => {
                    log::warn!("step {step}: NaN likelihood estimate, proposal rejected");
                    chain.failures += 1;
                }
                Err(e) => {
                    log::warn!("step {step}: likelihood estimate failed ({e}), proposal rejected");
                    chain.failures += 1;
                }
            }
        }
        chain.samples.push(theta.clone());
        chain.log_z.push(lz);
    }
    Ok(chain)
}

/// Integrated autocorrelation time by the initial positive sequence
/// estimator: `τ = −1 + 2 Σ_k (ρ_{2k} + ρ_{2k+1})`, summed while the pair sums
/// stay positive.
pub fn iact(samples: &[f64]) -> Result<f64, InferenceError> {
    const MIN_LEN: usize = 100;
    let n = samples.len();
    if n < MIN_LEN {
        return Err(InferenceError::TooShort { needed: MIN_LEN, got: n });
    }
    let gamma = autocovariance(samples);
    if !(gamma[0] > 0.0) {
        return Err(InferenceError::ConstantSequence);
    }
    let mut tau = -1.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = (gamma[2 * k] + gamma[2 * k + 1]) / gamma[0];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 1;
    }
    Ok(tau.max(f64::MIN_POSITIVE))
}

/// `L / iact`.
pub fn adjusted_sample_size(samples: &[f64]) -> Result<f64, InferenceError> {
    Ok(samples.len() as f64 / iact(samples)?)
}

/// Biased sample autocovariances `γ_k = (1/n) Σ (x_i − x̄)(x_{i+k} − x̄)`.
fn autocovariance(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = (size * n) as f64;
    buf[..n].iter().map(|c| c.re / scale).collect()
}
