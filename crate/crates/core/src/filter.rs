//! Twisted auxiliary particle filters with ESS-adaptive multinomial
//! resampling, ancestral lineages, and smoothing estimators.
//!
//! The bootstrap filter is the twisted filter with every `ψ_t` constant, and
//! always-resample is `κ = 1`.

use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::hmm::HmmModel;
use crate::math::{categorical_sample, ess, log_mean_exp, shifted_weights};
use crate::seed::rng_from_seed;
use crate::twist::{PsiSequence, TwistError, TwistWorkspace, TwistedModel};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("all particle weights vanished at step {step}")]
    Collapse { step: usize },
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error("ancestry was not recorded for this run")]
    AncestryNotRecorded,
    #[error(transparent)]
    Twist(#[from] TwistError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub n_particles: usize,
    pub kappa: f64,
    pub seed: u64,
    pub record_ancestry: bool,
}

impl FilterConfig {
    pub fn new(n_particles: usize, kappa: f64, seed: u64) -> Self {
        Self {
            n_particles,
            kappa,
            seed,
            record_ancestry: true,
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_particles == 0 {
            return Err(FilterError::InvalidConfig("N must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(FilterError::InvalidConfig(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        Ok(())
    }

    fn resample(&self, ess: f64) -> bool {
        self.kappa >= 1.0 || (self.kappa > 0.0 && ess <= self.kappa * self.n_particles as f64)
    }
}

/// Result of one filter run. Time indices are zero-based; the resampling
/// set holds the steps `t` whose weights `W_t` were resampled before
/// moving to `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterOutput {
    n_particles: usize,
    dim: usize,
    len: usize,
    kappa: f64,
    seed: u64,
    particles: Vec<f64>,
    log_weights: Vec<f64>,
    ancestors: Option<Vec<usize>>,
    resampling_times: Vec<usize>,
    per_step_log_means: Vec<f64>,
    ess: Vec<f64>,
    log_z: f64,
    wall_time_ms: f64,
}

impl FilterOutput {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ξ_t^i`.
    pub fn particle(&self, t: usize, i: usize) -> &[f64] {
        let start = (t * self.n_particles + i) * self.dim;
        &self.particles[start..start + self.dim]
    }

    /// All `N` particles at step `t`, row-major `N × d`.
    pub fn particles_at(&self, t: usize) -> &[f64] {
        let n = self.n_particles * self.dim;
        &self.particles[t * n..(t + 1) * n]
    }

    /// `log W_t^{1:N}`.
    pub fn log_weights_at(&self, t: usize) -> &[f64] {
        &self.log_weights[t * self.n_particles..(t + 1) * self.n_particles]
    }

    /// Ancestors of the step-`t` particles among the step-`t-1` particles
    /// (`t ≥ 1`); the identity when no resampling happened. `None` at `t = 0`
    /// or when ancestry was not recorded.
    pub fn ancestors_at(&self, t: usize) -> Option<&[usize]> {
        if t == 0 {
            return None;
        }
        let a = self.ancestors.as_ref()?;
        Some(&a[(t - 1) * self.n_particles..t * self.n_particles])
    }

    pub fn has_ancestry(&self) -> bool {
        self.ancestors.is_some()
    }

    pub fn resampling_times(&self) -> &[usize] {
        &self.resampling_times
    }

    pub fn resampling_count(&self) -> usize {
        self.resampling_times.len()
    }

    pub fn per_step_log_means(&self) -> &[f64] {
        &self.per_step_log_means
    }

    /// ESS of `W_t` for each `t`.
    pub fn ess_trace(&self) -> &[f64] {
        &self.ess
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn wall_time_ms(&self) -> f64 {
        self.wall_time_ms
    }

    pub fn summary(&self, estimator: &str) -> FilterSummary {
        FilterSummary {
            estimator: estimator.to_string(),
            n: self.n_particles,
            kappa: self.kappa,
            seed: self.seed,
            log_z: self.log_z,
            resampling_count: self.resampling_count(),
            wall_time_ms: Some(self.wall_time_ms),
        }
    }
}

/// One-line JSON record of a filter run.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct FilterSummary {
    pub estimator: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub kappa: f64,
    pub seed: u64,
    pub log_z: f64,
    pub resampling_count: usize,
    pub wall_time_ms: Option<f64>,
}

fn check_weights(log_weights: &[f64], step: usize) -> Result<f64, FilterError> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(FilterError::Collapse { step });
    }
    ess(log_weights).map_err(|_| FilterError::Collapse { step })
}

/// Runs the ψ-APF with κ-adaptive resampling on a prepared twisted model.
pub fn run_twisted(twisted: &TwistedModel<'_>, config: &FilterConfig) -> Result<FilterOutput, FilterError> {
    config.validate()?;
    let started = Instant::now();
    let n = config.n_particles;
    let d = twisted.dim();
    let len = twisted.len();
    let mut rng = rng_from_seed(config.seed);
    let mut ws = TwistWorkspace::new(d);

    let mut particles = vec![0.0; len * n * d];
    let mut log_weights = vec![0.0; len * n];
    let mut ancestors = config.record_ancestry.then(|| Vec::with_capacity(len.saturating_sub(1) * n));
    let mut resampling_times = Vec::new();
    let mut per_step_log_means = Vec::with_capacity(len);
    let mut ess_trace = Vec::with_capacity(len);

    for i in 0..n {
        let x = &mut particles[i * d..(i + 1) * d];
        twisted.sample_initial(&mut rng, x);
        log_weights[i] = twisted.log_g_twisted(0, x, &mut ws);
    }
    ess_trace.push(check_weights(&log_weights[..n], 0)?);
    per_step_log_means.push(log_mean_exp(&log_weights[..n]));

    let mut log_z = 0.0;
    for t in 1..len {
        let (prev_block, next_block) = particles.split_at_mut(t * n * d);
        let prev = &prev_block[(t - 1) * n * d..];
        let next = &mut next_block[..n * d];
        let (w_prev_block, w_next_block) = log_weights.split_at_mut(t * n);
        let w_prev = &w_prev_block[(t - 1) * n..];
        let w_next = &mut w_next_block[..n];

        if config.resample(ess_trace[t - 1]) {
            resampling_times.push(t - 1);
            log_z += per_step_log_means[t - 1];
            let idx = categorical_sample(&mut rng, w_prev, n).map_err(|_| FilterError::Collapse { step: t - 1 })?;
            for (i, &a) in idx.iter().enumerate() {
                let x = &mut next[i * d..(i + 1) * d];
                twisted.sample_transition(t, &prev[a * d..(a + 1) * d], &mut ws, &mut rng, x);
                w_next[i] = twisted.log_g_twisted(t, x, &mut ws);
            }
            if let Some(anc) = ancestors.as_mut() {
                anc.extend_from_slice(&idx);
            }
        } else {
            for i in 0..n {
                let x = &mut next[i * d..(i + 1) * d];
                twisted.sample_transition(t, &prev[i * d..(i + 1) * d], &mut ws, &mut rng, x);
                w_next[i] = w_prev[i] + twisted.log_g_twisted(t, x, &mut ws);
            }
            if let Some(anc) = ancestors.as_mut() {
                anc.extend(0..n);
            }
        }
        ess_trace.push(check_weights(w_next, t)?);
        per_step_log_means.push(log_mean_exp(w_next));
    }
    log_z += per_step_log_means[len - 1];

    Ok(FilterOutput {
        n_particles: n,
        dim: d,
        len,
        kappa: config.kappa,
        seed: config.seed,
        particles,
        log_weights,
        ancestors,
        resampling_times,
        per_step_log_means,
        ess: ess_trace,
        log_z,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// ψ-APF with κ-adaptive resampling (`κ = 1` resamples at every step).
pub fn run_psi_apf(model: &HmmModel, psi: &PsiSequence, config: &FilterConfig) -> Result<FilterOutput, FilterError> {
    let twisted = TwistedModel::new(model, psi)?;
    run_twisted(&twisted, config)
}

/// Bootstrap particle filter: the ψ-APF with constant twisting functions.
pub fn run_bpf(model: &HmmModel, config: &FilterConfig) -> Result<FilterOutput, FilterError> {
    let psi = PsiSequence::constant(model.len(), model.dim_state());
    run_psi_apf(model, &psi, config)
}

/// `B_t^i`: index at step `t` of the ancestor of terminal particle `i`.
pub fn ancestral_lineages(out: &FilterOutput) -> Result<Vec<Vec<usize>>, FilterError> {
    if !out.has_ancestry() {
        return Err(FilterError::AncestryNotRecorded);
    }
    let n = out.n_particles;
    let mut b = vec![vec![0usize; n]; out.len];
    b[out.len - 1] = (0..n).collect();
    for t in (1..out.len).rev() {
        let a = out.ancestors_at(t).expect("ancestry recorded");
        for i in 0..n {
            b[t - 1][i] = a[b[t][i]];
        }
    }
    Ok(b)
}

/// `π^N(φ)` and `γ^N(φ) = π^N(φ)·Ẑ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothingEstimate {
    pub pi: f64,
    pub gamma: f64,
}

fn normalized_terminal_weights(out: &FilterOutput) -> Vec<f64> {
    let w = shifted_weights(out.log_weights_at(out.len - 1)).expect("weights validated during the run");
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Self-normalized estimate of the smoothing expectation of a path
/// functional, weighting each ancestral lineage by its terminal weight.
pub fn smoothing_expectation<F>(out: &FilterOutput, phi: F) -> Result<SmoothingEstimate, FilterError>
where
    F: Fn(&[&[f64]]) -> f64,
{
    let lineages = ancestral_lineages(out)?;
    let w = normalized_terminal_weights(out);
    let mut path: Vec<&[f64]> = Vec::with_capacity(out.len);
    let mut pi = 0.0;
    for (i, wi) in w.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        path.clear();
        path.extend((0..out.len).map(|t| out.particle(t, lineages[t][i])));
        pi += wi * phi(&path);
    }
    Ok(SmoothingEstimate {
        pi,
        gamma: pi * out.log_z.exp(),
    })
}

/// `π^N(x_t[coord])` for every `t` in one pass over the lineages.
pub fn smoothed_coordinate_means(out: &FilterOutput, coord: usize) -> Result<Vec<f64>, FilterError> {
    let lineages = ancestral_lineages(out)?;
    let w = normalized_terminal_weights(out);
    Ok((0..out.len)
        .map(|t| {
            w.iter()
                .enumerate()
                .map(|(i, wi)| wi * out.particle(t, lineages[t][i])[coord])
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{build_linear_gaussian, Observations};
    use crate::twist::exact_psi_star_lgssm;
    use nalgebra::{dmatrix, dvector};

    fn model(len: usize) -> HmmModel {
        let space = build_linear_gaussian(
            dvector![0.0],
            dmatrix![1.0],
            dmatrix![0.9],
            dmatrix![0.5],
            dmatrix![1.0],
            dmatrix![1.0],
        )
        .unwrap();
        let (_, obs) = space.simulate(len, &mut rng_from_seed(10));
        space.bind(obs).unwrap()
    }

    #[test]
    fn bpf_equals_constant_psi_apf() {
        let m = model(8);
        let cfg = FilterConfig::new(50, 0.5, 3);
        let a = run_bpf(&m, &cfg).unwrap();
        let b = run_psi_apf(&m, &PsiSequence::constant(8, 1), &cfg).unwrap();
        assert_eq!(a.particles, b.particles);
        assert_eq!(a.log_weights, b.log_weights);
        assert_eq!(a.ancestors, b.ancestors);
        assert_eq!(a.log_z.to_bits(), b.log_z.to_bits());
    }

    #[test]
    fn kappa_extremes() {
        let m = model(10);
        let never = run_bpf(&m, &FilterConfig::new(20, 0.0, 1)).unwrap();
        assert!(never.resampling_times().is_empty());
        let lineages = ancestral_lineages(&never).unwrap();
        assert!(lineages.iter().all(|row| row.iter().enumerate().all(|(i, &b)| b == i)));
        // Pure importance sampling: W_T^i is the product of the potentials along each path.
        for i in 0..20 {
            let direct: f64 = (0..10).map(|t| m.log_g(t, never.particle(t, i))).sum();
            assert!((never.log_weights_at(9)[i] - direct).abs() < 1e-10);
        }
        let always = run_bpf(&m, &FilterConfig::new(20, 1.0, 1)).unwrap();
        assert_eq!(always.resampling_times(), &(0..9).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn single_particle_log_z() {
        let m = model(5);
        let out = run_bpf(&m, &FilterConfig::new(1, 1.0, 2)).unwrap();
        let direct: f64 = (0..5).map(|t| m.log_g(t, out.particle(t, 0))).sum();
        assert!((out.log_z() - direct).abs() < 1e-12);
    }

    #[test]
    fn lineage_recursion_holds() {
        let m = model(12);
        let out = run_bpf(&m, &FilterConfig::new(30, 0.7, 4)).unwrap();
        let b = ancestral_lineages(&out).unwrap();
        for t in 1..12 {
            let a = out.ancestors_at(t).unwrap();
            for i in 0..30 {
                assert_eq!(b[t - 1][i], a[b[t][i]]);
            }
        }
    }

    #[test]
    fn smoothing_normalization_and_linearity() {
        let m = model(6);
        let out = run_bpf(&m, &FilterConfig::new(100, 0.5, 5)).unwrap();
        let one = smoothing_expectation(&out, |_| 1.0).unwrap();
        assert!((one.pi - 1.0).abs() < 1e-12);
        let f1 = smoothing_expectation(&out, |p| p[2][0]).unwrap().pi;
        let f2 = smoothing_expectation(&out, |p| p[4][0] * p[4][0]).unwrap().pi;
        let comb = smoothing_expectation(&out, |p| 2.0 * p[2][0] - 0.5 * p[4][0] * p[4][0]).unwrap().pi;
        assert!((comb - (2.0 * f1 - 0.5 * f2)).abs() < 1e-10);
        let means = smoothed_coordinate_means(&out, 0).unwrap();
        assert!((means[2] - f1).abs() < 1e-12);
    }

    #[test]
    fn ancestry_required_for_smoothing() {
        let m = model(3);
        let mut cfg = FilterConfig::new(10, 0.5, 1);
        cfg.record_ancestry = false;
        let out = run_bpf(&m, &cfg).unwrap();
        assert!(matches!(ancestral_lineages(&out), Err(FilterError::AncestryNotRecorded)));
    }

    #[test]
    fn psi_star_never_resamples() {
        let m = model(20);
        let star = exact_psi_star_lgssm(&m, true).unwrap();
        let out = run_psi_apf(&m, &star.psi, &FilterConfig::new(10, 0.5, 9)).unwrap();
        assert!(out.resampling_times().is_empty());
        assert!(out.ess_trace().iter().all(|e| (e - 10.0).abs() < 1e-9));
        assert!((out.log_z() - star.log_psi_tilde_0).abs() < 1e-9);
    }

    #[test]
    fn collapse_is_reported() {
        // A tiny observation variance and an outlandish observation underflow every weight.
        let space = build_linear_gaussian(dvector![0.0], dmatrix![1.0], dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1e-300]).unwrap();
        let obs = Observations::from_flat(1, vec![0.0, 1e10]).unwrap();
        let m = space.bind(obs).unwrap();
        assert!(matches!(run_bpf(&m, &FilterConfig::new(5, 0.5, 1)), Err(FilterError::Collapse { step: 1 })));
    }

    #[test]
    fn invalid_config() {
        let m = model(2);
        assert!(run_bpf(&m, &FilterConfig::new(0, 0.5, 1)).is_err());
        assert!(run_bpf(&m, &FilterConfig::new(5, 1.5, 1)).is_err());
    }
}
