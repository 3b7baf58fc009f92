//! Fixtures shared by the criterion benchmarks.

use iapf_core::hmm::build_banded_linear_gaussian;
use iapf_core::learn::approximate_psi_sequence;
use iapf_core::{rng_from_seed, run_bpf, FilterConfig, FitConfig, HmmModel, PsiSequence};

/// The banded linear-Gaussian model (`α = 0.42`) with simulated data.
pub fn banded_model(dim: usize, len: usize) -> HmmModel {
    let space = build_banded_linear_gaussian(dim, 0.42).expect("valid model");
    let (_, obs) = space.simulate(len, &mut rng_from_seed(1));
    space.bind(obs).expect("matching dimensions")
}

/// Twisting functions fitted from one bootstrap run.
pub fn learned_psi(model: &HmmModel, n: usize) -> PsiSequence {
    let out = run_bpf(model, &FilterConfig::new(n, 0.5, 2)).expect("bootstrap run");
    approximate_psi_sequence(model, &out, &FitConfig::default()).expect("backward fit")
}
