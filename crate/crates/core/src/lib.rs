//! Twisted hidden Markov models and the iterated auxiliary particle filter.

pub mod families;
pub mod filter;
pub mod hmm;
pub mod iapf;
pub mod inference;
pub mod learn;
pub mod math;
pub mod oracle;
pub mod seed;
pub mod twist;

pub use families::ModelFamily;
pub use filter::{run_bpf, run_psi_apf, run_twisted, FilterConfig, FilterError, FilterOutput, FilterSummary};
pub use hmm::{HmmModel, ModelError, Observations, StateSpaceModel};
pub use iapf::{run_iapf, IapfConfig, IapfError, IapfResult, IapfTrace};
pub use inference::{run_pmmh, Chain, Estimator, MhConfig, Prior, PriorKind};
pub use learn::{FitConfig, FitError, FitInit, Regularizer};
pub use math::{Covariance, GaussianComponent, GaussianMixture, MathError};
pub use oracle::{kalman_log_likelihood, Grid1D, KalmanResult, OracleError};
pub use seed::{derive_seed, rng_from_seed, SmcRng};
pub use twist::{PsiFunction, PsiSequence, TwistError, TwistedModel};
