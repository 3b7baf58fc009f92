#![allow(dead_code)]

use iapf_core::hmm::{build_linear_gaussian, build_multivariate_sv, build_univariate_sv_stationary, HmmModel, StateSpaceModel};
use iapf_core::math::{Covariance, GaussianComponent};
use iapf_core::twist::{PsiFunction, PsiSequence};
use iapf_core::SmcRng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normal(rng: &mut SmcRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_spd(rng: &mut SmcRng, d: usize) -> DMatrix<f64> {
    let l = DMatrix::from_fn(d, d, |_, _| 0.5 * normal(rng));
    &l * l.transpose() + DMatrix::identity(d, d) * 0.3
}

pub fn random_component(rng: &mut SmcRng, d: usize, dense: bool) -> GaussianComponent {
    let mean = DVector::from_fn(d, |_, _| 2.0 * normal(rng));
    let cov = if dense {
        Covariance::dense(random_spd(rng, d)).unwrap()
    } else {
        Covariance::diagonal(DVector::from_fn(d, |_, _| 0.3 + rng.random::<f64>() * 2.0)).unwrap()
    };
    GaussianComponent::new(mean, cov, rng.random::<f64>() - 0.5).unwrap()
}

/// `c + Σ_k w_k 𝒩(·; a_k, b_k)` with one or two components.
pub fn random_psi(rng: &mut SmcRng, d: usize) -> PsiFunction {
    let k = 1 + rng.random_range(0..2);
    let comps = (0..k)
        .map(|_| {
            let dense = rng.random::<bool>();
            random_component(rng, d, dense)
        })
        .collect();
    let constant = if rng.random::<bool>() { 0.0 } else { 0.05 * rng.random::<f64>() + 1e-3 };
    PsiFunction::new(d, constant, comps).unwrap().with_log_scale(3.0 * normal(rng))
}

pub fn random_psi_sequence(rng: &mut SmcRng, d: usize, len: usize) -> PsiSequence {
    PsiSequence::new((0..len).map(|_| random_psi(rng, d)).collect()).unwrap()
}

pub fn random_linear_gaussian(rng: &mut SmcRng, d: usize) -> StateSpaceModel {
    let a = DMatrix::from_fn(d, d, |_, _| 0.3 * normal(rng));
    let c = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.2 * normal(rng) });
    build_linear_gaussian(
        DVector::from_fn(d, |_, _| normal(rng)),
        random_spd(rng, d),
        a,
        random_spd(rng, d),
        c,
        random_spd(rng, d),
    )
    .unwrap()
}

pub fn random_univariate_sv(rng: &mut SmcRng) -> StateSpaceModel {
    build_univariate_sv_stationary(0.5 + 0.45 * rng.random::<f64>(), 0.1 + 0.5 * rng.random::<f64>(), 0.3 + rng.random::<f64>()).unwrap()
}

pub fn random_multivariate_sv(rng: &mut SmcRng, d: usize) -> StateSpaceModel {
    let phi = DVector::from_fn(d, |_, _| 0.5 + 0.45 * rng.random::<f64>());
    build_multivariate_sv(DVector::from_fn(d, |_, _| normal(rng)), phi, random_spd(rng, d)).unwrap()
}

/// Simulated data bound to the model.
pub fn bound(space: &StateSpaceModel, len: usize, rng: &mut SmcRng) -> (Vec<DVector<f64>>, HmmModel) {
    let (xs, obs) = space.simulate(len, rng);
    (xs, space.bind(obs).unwrap())
}

/// `√Σ(x − x̄)²/(n−1)` and the mean.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}
