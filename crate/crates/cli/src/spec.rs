//! JSON experiment configuration. Every struct rejects unknown keys and is
//! validated before any computation starts.

use std::path::PathBuf;

use iapf_core::hmm::build_banded_linear_gaussian;
use iapf_core::{rng_from_seed, Estimator, FilterConfig, HmmModel, IapfConfig, ModelFamily, Observations, StateSpaceModel};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `m = 0`, `Σ = B = C = D = I`, `A_ij = α^{|i-j|+1}`.
    BandedLinearGaussian { dim: usize, alpha: f64 },
    /// A parameterized family at `theta`; omitted `theta` means the family's
    /// default starting point.
    Family {
        family: ModelFamily,
        #[serde(default)]
        theta: Option<Vec<f64>>,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            ModelSpec::BandedLinearGaussian { dim, alpha } => {
                if *dim == 0 || !alpha.is_finite() {
                    return Err(CliError::Config(format!("banded model needs dim >= 1 and finite alpha, got {dim}, {alpha}")));
                }
            }
            ModelSpec::Family { family, theta } => {
                family.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if let Some(t) = theta {
                    if t.len() != family.n_params() {
                        return Err(CliError::Config(format!("theta has {} entries, family needs {}", t.len(), family.n_params())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> Option<&ModelFamily> {
        match self {
            ModelSpec::Family { family, .. } => Some(family),
            ModelSpec::BandedLinearGaussian { .. } => None,
        }
    }

    pub fn theta(&self, observations: Option<&Observations>) -> Option<Vec<f64>> {
        match self {
            ModelSpec::Family { family, theta } => Some(theta.clone().unwrap_or_else(|| family.default_theta0(observations))),
            ModelSpec::BandedLinearGaussian { .. } => None,
        }
    }

    pub fn space(&self) -> Result<StateSpaceModel, CliError> {
        match self {
            ModelSpec::BandedLinearGaussian { dim, alpha } => build_banded_linear_gaussian(*dim, *alpha),
            ModelSpec::Family { family, .. } => family.build(&self.theta(None).expect("family model")),
        }
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Draws `length` observations from the model with its own seed.
    Simulate { length: usize, seed: u64 },
    /// Comma-separated rows, one per time step.
    Csv { path: PathBuf },
}

impl DataSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        match self {
            DataSpec::Simulate { length: 0, .. } => Err(CliError::Config("simulated length must be at least 1".into())),
            _ => Ok(()),
        }
    }

    pub fn observations(&self, space: &StateSpaceModel) -> Result<Observations, CliError> {
        match self {
            DataSpec::Simulate { length, seed } => Ok(space.simulate(*length, &mut rng_from_seed(*seed)).1),
            DataSpec::Csv { path } => {
                Observations::from_csv_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            }
        }
    }
}

/// Builds the model and binds the data to it.
pub fn bind(model: &ModelSpec, data: &DataSpec) -> Result<HmmModel, CliError> {
    let space = model.space()?;
    let obs = data.observations(&space)?;
    space.bind(obs).map_err(|e| CliError::Config(e.to_string()))
}

fn default_kappa() -> f64 {
    0.5
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BpfParams {
    pub n: usize,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct IapfParams {
    pub n0: usize,
    pub k: usize,
    pub tau: f64,
    pub kappa: f64,
    pub n_max: usize,
    pub l_max: usize,
}

impl Default for IapfParams {
    fn default() -> Self {
        let c = IapfConfig::default();
        Self { n0: c.n0, k: c.k, tau: c.tau, kappa: c.kappa, n_max: c.n_max, l_max: c.l_max }
    }
}

impl IapfParams {
    pub fn config(&self, seed: u64) -> IapfConfig {
        IapfConfig {
            n0: self.n0,
            k: self.k,
            tau: self.tau,
            kappa: self.kappa,
            seed,
            n_max: self.n_max,
            l_max: self.l_max,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorSpec {
    Bpf(BpfParams),
    Iapf(IapfParams),
    /// Exact likelihood; linear-Gaussian models only.
    Kalman,
}

impl EstimatorSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: String| Err(CliError::Config(e));
        match self {
            EstimatorSpec::Bpf(p) => FilterConfig::new(p.n, p.kappa, 0).validate().or_else(|e| err(e.to_string())),
            EstimatorSpec::Iapf(p) => p.config(0).validate().or_else(|e| err(e.to_string())),
            EstimatorSpec::Kalman => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Bpf(p) => format!("bpf(N={})", p.n),
            EstimatorSpec::Iapf(p) => format!("iapf(N0={})", p.n0),
            EstimatorSpec::Kalman => "kalman".into(),
        }
    }

    pub fn core(&self) -> Estimator {
        match self {
            EstimatorSpec::Bpf(p) => Estimator::Bpf { n_particles: p.n, kappa: p.kappa },
            EstimatorSpec::Iapf(p) => Estimator::Iapf(p.config(0)),
            EstimatorSpec::Kalman => Estimator::Kalman,
        }
    }

    fn require_filter(&self, what: &str) -> Result<(), CliError> {
        match self {
            EstimatorSpec::Kalman => Err(CliError::Config(format!("{what} needs a particle estimator (bpf or iapf)"))),
            _ => self.validate(),
        }
    }
}

fn check_estimators(list: &[EstimatorSpec]) -> Result<(), CliError> {
    if list.is_empty() {
        return Err(CliError::Config("at least one estimator is required".into()));
    }
    list.iter().try_for_each(EstimatorSpec::validate)
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub estimator: EstimatorSpec,
}

impl FilterSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        self.estimator.require_filter("filter")
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct IapfSpec {
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub iapf: IapfParams,
}

impl IapfSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        EstimatorSpec::Iapf(self.iapf.clone()).validate()
    }
}

fn default_alpha() -> f64 {
    0.42
}

fn default_length() -> usize {
    100
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BenchDimSpec {
    pub dims: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default)]
    pub data_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
}

impl BenchDimSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(CliError::Config("dims must be a non-empty list of positive dimensions".into()));
        }
        if self.length == 0 || !self.alpha.is_finite() {
            return Err(CliError::Config("length must be positive and alpha finite".into()));
        }
        check_estimators(&self.estimators)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BenchParamSpec {
    pub dim: usize,
    pub alphas: Vec<f64>,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default)]
    pub data_seed: u64,
    pub estimators: Vec<EstimatorSpec>,
}

impl BenchParamSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.dim == 0 || self.length == 0 || self.alphas.is_empty() || self.alphas.iter().any(|a| !a.is_finite()) {
            return Err(CliError::Config("need dim >= 1, length >= 1 and a non-empty list of finite alphas".into()));
        }
        check_estimators(&self.estimators)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PmmhSpec {
    /// Family model; `theta` is the parameter used to simulate data.
    pub model: ModelSpec,
    pub data: DataSpec,
    pub chain_length: usize,
    pub estimator: EstimatorSpec,
    /// Chain start; defaults to the family's starting point.
    #[serde(default)]
    pub theta0: Option<Vec<f64>>,
    #[serde(default)]
    pub proposal_sd: Option<Vec<f64>>,
}

impl PmmhSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        self.estimator.validate()?;
        let family = self.model.family().ok_or_else(|| CliError::Config("pmmh needs a family model".into()))?;
        let p = family.n_params();
        if self.chain_length == 0 {
            return Err(CliError::Config("chain_length must be at least 1".into()));
        }
        for (name, v) in [("theta0", &self.theta0), ("proposal_sd", &self.proposal_sd)] {
            if let Some(v) = v {
                if v.len() != p {
                    return Err(CliError::Config(format!("{name} has {} entries, family needs {p}", v.len())));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    /// Family model; `theta` is the parameter used to simulate data.
    pub model: ModelSpec,
    pub data: DataSpec,
    /// Parameter points at which the likelihood is estimated.
    pub points: Vec<Vec<f64>>,
    pub estimators: Vec<EstimatorSpec>,
}

impl ProfileSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        let family = self.model.family().ok_or_else(|| CliError::Config("profile needs a family model".into()))?;
        if self.points.is_empty() {
            return Err(CliError::Config("points must be non-empty".into()));
        }
        if let Some(bad) = self.points.iter().find(|p| p.len() != family.n_params()) {
            return Err(CliError::Config(format!("point {bad:?} does not have {} entries", family.n_params())));
        }
        check_estimators(&self.estimators)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothSpec {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub estimator: EstimatorSpec,
    #[serde(default)]
    pub coordinate: usize,
}

impl SmoothSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.data.validate()?;
        self.estimator.require_filter("smooth")
    }
}
