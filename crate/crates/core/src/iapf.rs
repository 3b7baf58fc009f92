//! The iterated auxiliary particle filter: alternate twisted filter runs and
//! backward refits of the twisting sequence until the last `k + 1`
//! likelihood estimates agree to relative standard deviation `τ`, then
//! return a fresh estimate under the final sequence.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::filter::{run_twisted, FilterConfig, FilterError, FilterOutput};
use crate::hmm::HmmModel;
use crate::learn::{approximate_psi_sequence, FitConfig, FitError};
use crate::seed::derive_seed;
use crate::twist::{PsiSequence, TwistedModel};

/// Seed-stream index of the final estimate.
const FINAL_STREAM: u64 = u64::MAX;
/// Offset of the seed streams used when an iteration is retried after a collapse.
const RETRY_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct IapfConfig {
    pub n0: usize,
    pub k: usize,
    pub tau: f64,
    pub kappa: f64,
    pub seed: u64,
    pub n_max: usize,
    pub l_max: usize,
    pub fit: FitConfig,
}

impl Default for IapfConfig {
    fn default() -> Self {
        Self {
            n0: 1000,
            k: 3,
            tau: 0.5,
            kappa: 0.5,
            seed: 0,
            n_max: 1 << 20,
            l_max: 200,
            fit: FitConfig::default(),
        }
    }
}

impl IapfConfig {
    pub fn validate(&self) -> Result<(), IapfError> {
        let bad = |m: String| Err(IapfError::InvalidConfig(m));
        if self.n0 == 0 {
            return bad("n0 must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.kappa));
        }
        if self.n_max < self.n0 {
            return bad("n_max must be at least n0".into());
        }
        if self.l_max <= self.k {
            return bad("l_max must exceed k".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    IterationLimit,
    ParticleLimit,
}

/// One filter run of the iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IapfRecord {
    pub l: usize,
    #[serde(rename = "N")]
    pub n_particles: usize,
    pub log_z: f64,
    pub resampling_count: usize,
    /// Whether `ψ^{l+1}` was fitted from this run's particles.
    pub fitted_next: bool,
    pub retried: bool,
    pub wall_time_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IapfTrace {
    pub records: Vec<IapfRecord>,
    pub termination: Option<Termination>,
}

impl IapfTrace {
    pub fn log_estimates(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.log_z).collect()
    }

    pub fn particle_counts(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.n_particles).collect()
    }

    /// One JSON object per iteration.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("plain record"));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum IapfError {
    #[error("invalid iAPF configuration: {0}")]
    InvalidConfig(String),
    #[error("iteration limit reached after {} runs", .0.records.len())]
    IterationLimit(IapfTrace),
    #[error("particle limit reached after {} runs", .0.records.len())]
    ParticleLimit(IapfTrace),
    #[error("filter failed at iteration {l}: {source}")]
    Filter {
        l: usize,
        #[source]
        source: FilterError,
        trace: IapfTrace,
    },
    #[error("fit failed at iteration {l}: {source}")]
    Fit {
        l: usize,
        #[source]
        source: FitError,
        trace: IapfTrace,
    },
}

/// Produces `ψ^{l+1}` from the particles of a `ψ^l`-APF run.
pub trait PsiLearner {
    fn learn(&self, model: &HmmModel, output: &FilterOutput, current: &PsiSequence) -> Result<PsiSequence, FitError>;
}

/// The backward parametric fit.
#[derive(Clone, Debug, Default)]
pub struct BackwardFit(pub FitConfig);

impl PsiLearner for BackwardFit {
    fn learn(&self, model: &HmmModel, output: &FilterOutput, _current: &PsiSequence) -> Result<PsiSequence, FitError> {
        approximate_psi_sequence(model, output, &self.0)
    }
}

/// Always returns the same sequence.
#[derive(Clone, Debug)]
pub struct FixedPsi(pub PsiSequence);

impl PsiLearner for FixedPsi {
    fn learn(&self, _model: &HmmModel, _output: &FilterOutput, _current: &PsiSequence) -> Result<PsiSequence, FitError> {
        Ok(self.0.clone())
    }
}

/// `sd/mean` of `exp(log_values)`, sample sd with divisor `n − 1`; invariant
/// to a common shift of the logs.
pub fn relative_sd(log_values: &[f64]) -> f64 {
    let n = log_values.len();
    if n < 2 {
        return f64::NAN;
    }
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: Vec<f64> = log_values.iter().map(|v| (v - max).exp()).collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt() / mean
}

/// Stop once `l > k` and the last `k + 1` estimates have relative sd below `τ`.
pub fn should_stop(log_estimates: &[f64], k: usize, tau: f64) -> bool {
    let l = log_estimates.len().saturating_sub(1);
    if log_estimates.is_empty() || l <= k {
        return false;
    }
    relative_sd(&log_estimates[l - k..]) < tau
}

/// Particle count for iteration `l + 1`: doubles when `N_{l−k} = N_l` and
/// the window `Ẑ_{l−k:l}` is not weakly increasing.
pub fn next_particle_count(log_estimates: &[f64], counts: &[usize], k: usize) -> usize {
    let l = counts.len() - 1;
    let n_l = counts[l];
    if l < k || counts[l - k] != n_l {
        return n_l;
    }
    let window = &log_estimates[l - k..=l];
    let increasing = window.windows(2).all(|w| w[0] <= w[1]);
    if increasing {
        n_l
    } else {
        2 * n_l
    }
}

#[derive(Debug)]
pub struct IapfResult {
    pub log_z: f64,
    pub psi: PsiSequence,
    pub trace: IapfTrace,
    /// The final estimate's filter run.
    pub output: FilterOutput,
}

impl IapfResult {
    pub fn final_particles(&self) -> usize {
        self.output.n_particles()
    }
}

pub fn run_iapf(model: &HmmModel, config: &IapfConfig) -> Result<IapfResult, IapfError> {
    run_iapf_with(model, config, &BackwardFit(config.fit.clone()))
}

fn run_once(model: &HmmModel, psi: &PsiSequence, n: usize, kappa: f64, seed: u64) -> Result<FilterOutput, FilterError> {
    let twisted = TwistedModel::new(model, psi)?;
    run_twisted(&twisted, &FilterConfig::new(n, kappa, seed))
}

pub fn run_iapf_with<L: PsiLearner + ?Sized>(model: &HmmModel, config: &IapfConfig, learner: &L) -> Result<IapfResult, IapfError> {
    config.validate()?;
    let mut trace = IapfTrace::default();
    let mut psi = PsiSequence::constant(model.len(), model.dim_state());
    let mut n = config.n0;
    let mut counts: Vec<usize> = Vec::new();
    let mut log_estimates: Vec<f64> = Vec::new();
    let mut l = 0usize;
    loop {
        if l >= config.l_max {
            trace.termination = Some(Termination::IterationLimit);
            return Err(IapfError::IterationLimit(trace));
        }
        let started = Instant::now();
        let mut retried = false;
        let out = match run_once(model, &psi, n, config.kappa, derive_seed(config.seed, l as u64)) {
            Ok(out) => out,
            Err(FilterError::Collapse { step }) => {
                log::warn!("iAPF iteration {l}: particle collapse at step {step}, retrying with {} particles", 2 * n);
                retried = true;
                n *= 2;
                if n > config.n_max {
                    trace.termination = Some(Termination::ParticleLimit);
                    return Err(IapfError::ParticleLimit(trace));
                }
                run_once(model, &psi, n, config.kappa, derive_seed(config.seed, RETRY_STREAM + l as u64))
                    .map_err(|source| IapfError::Filter { l, source, trace: trace.clone() })?
            }
            Err(source) => return Err(IapfError::Filter { l, source, trace }),
        };
        counts.push(n);
        log_estimates.push(out.log_z());
        let stop = should_stop(&log_estimates, config.k, config.tau);
        if !stop {
            psi = learner
                .learn(model, &out, &psi)
                .map_err(|source| IapfError::Fit { l, source, trace: trace.clone() })?;
        }
        trace.records.push(IapfRecord {
            l,
            n_particles: n,
            log_z: out.log_z(),
            resampling_count: out.resampling_count(),
            fitted_next: !stop,
            retried,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if stop {
            break;
        }
        let next = next_particle_count(&log_estimates, &counts, config.k);
        if next > config.n_max {
            trace.termination = Some(Termination::ParticleLimit);
            return Err(IapfError::ParticleLimit(trace));
        }
        n = next;
        l += 1;
    }
    trace.termination = Some(Termination::Converged);
    let output = run_once(model, &psi, n, config.kappa, derive_seed(config.seed, FINAL_STREAM))
        .map_err(|source| IapfError::Filter { l: l + 1, source, trace: trace.clone() })?;
    Ok(IapfResult {
        log_z: output.log_z(),
        psi,
        trace,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::build_linear_gaussian;
    use crate::seed::rng_from_seed;
    use crate::twist::exact_psi_star_lgssm;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn relative_sd_is_shift_invariant() {
        let a = [0.1, -0.3, 0.25, 0.0];
        let b: Vec<f64> = a.iter().map(|v| v + 500.0).collect();
        assert!((relative_sd(&a) - relative_sd(&b)).abs() < 1e-12);
        // exp values 1, 1 → sd 0
        assert_eq!(relative_sd(&[2.0, 2.0]), 0.0);
        // values e^0 = 1 and e^{ln 3} = 3: mean 2, sample sd √2
        assert!((relative_sd(&[0.0, 3f64.ln()]) - 2f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn stop_rule_needs_more_than_k_plus_one_runs() {
        let flat = vec![0.0; 10];
        assert!(!should_stop(&flat[..4], 3, 1e6));
        assert!(should_stop(&flat[..5], 3, 1e6));
        assert!(!should_stop(&[0.0, 0.0, 0.0, 0.0, 5.0], 3, 0.5));
    }

    #[test]
    fn doubling_rule_scripts() {
        let k = 2;
        // Oscillating window at constant N doubles.
        assert_eq!(next_particle_count(&[0.0, 1.0, 0.5], &[100, 100, 100], k), 200);
        // Weakly increasing window keeps N, including ties.
        assert_eq!(next_particle_count(&[0.0, 1.0, 1.0], &[100, 100, 100], k), 100);
        // N changed inside the window: no doubling.
        assert_eq!(next_particle_count(&[0.0, 1.0, 0.5], &[50, 100, 100], k), 100);
        // Too early to look back k steps.
        assert_eq!(next_particle_count(&[0.0, -1.0], &[100, 100], k), 100);
    }

    fn model(len: usize) -> HmmModel {
        let space = build_linear_gaussian(dvector![0.0], dmatrix![1.0], dmatrix![0.8], dmatrix![0.5], dmatrix![1.0], dmatrix![0.5]).unwrap();
        let (_, obs) = space.simulate(len, &mut rng_from_seed(3));
        space.bind(obs).unwrap()
    }

    #[test]
    fn vacuous_tau_runs_k_plus_three_filters() {
        let m = model(10);
        let cfg = IapfConfig {
            n0: 100,
            k: 2,
            tau: 1e6,
            seed: 1,
            ..IapfConfig::default()
        };
        let res = run_iapf(&m, &cfg).unwrap();
        // Iterations l = 0..=k+1 plus the final run.
        assert_eq!(res.trace.records.len(), cfg.k + 2);
        assert_eq!(res.trace.termination, Some(Termination::Converged));
        assert!(res.log_z.is_finite());
        let lines = res.trace.to_json_lines();
        assert_eq!(lines.lines().count(), cfg.k + 2);
        assert!(lines.lines().next().unwrap().contains("\"N\":100"));
    }

    #[test]
    fn exact_psi_stops_at_first_check() {
        let m = model(15);
        let star = exact_psi_star_lgssm(&m, false).unwrap();
        let cfg = IapfConfig {
            n0: 20,
            k: 3,
            tau: 1e-9,
            seed: 4,
            ..IapfConfig::default()
        };
        // ψ^0 is constant; from l = 1 onwards every estimate is exact, so the
        // first window Ẑ_{1:k+1} already agrees.
        let res = run_iapf_with(&m, &cfg, &FixedPsi(star.psi.clone())).unwrap();
        assert_eq!(res.trace.records.len(), cfg.k + 2);
        assert!((res.log_z - star.log_psi_tilde_0).abs() < 1e-8);
    }

    #[test]
    fn limits_are_reported() {
        let m = model(10);
        let cfg = IapfConfig {
            n0: 50,
            k: 1,
            tau: 1e-12,
            l_max: 4,
            seed: 2,
            ..IapfConfig::default()
        };
        match run_iapf(&m, &cfg) {
            Err(IapfError::IterationLimit(trace)) | Err(IapfError::ParticleLimit(trace)) => {
                assert!(trace.records.len() <= 4);
                let counts = trace.particle_counts();
                assert!(counts.windows(2).all(|w| w[1] == w[0] || w[1] == 2 * w[0]));
            }
            other => panic!("expected a limit error, got {other:?}"),
        }
        assert!(IapfConfig { k: 0, ..IapfConfig::default() }.validate().is_err());
    }
}
