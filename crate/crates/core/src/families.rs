//! Parameterized model families for likelihood-based inference: each maps a
//! parameter vector `θ` to a state-space model and carries default priors,
//! starting points and proposal scales.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hmm::{build_linear_gaussian, build_multivariate_sv, build_univariate_sv, ModelError, StateSpaceModel};
use crate::inference::{Prior, PriorKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelFamily {
    /// `d = 1`, `μ = 𝒩(0, 1)`, `f(x,·) = 𝒩(αx, 1)`, `g(x,·) = 𝒩(x, δ)`; `θ = (α)`.
    ScalarLinearGaussian { delta: f64 },
    /// `m = 0`, `Σ = B = C = I`, `D = δI` and lower-triangular `A`; `θ` lists
    /// `A_ij`, `j ≤ i`, row by row.
    LowerTriangularLinearGaussian { dim: usize, delta: f64 },
    /// `θ = (α, σ, β)`.
    UnivariateSv,
    /// `θ = (m, φ, diag U, ρ)` with tridiagonal `U`,
    /// `U_{i,i+1} = ρ_i (U_ii U_{i+1,i+1})^{1/2}`.
    MultivariateSv { dim: usize },
}

/// `U` with the given diagonal and first off-diagonal correlations.
pub fn tridiagonal_covariance(diag: &[f64], rho: &[f64]) -> Result<DMatrix<f64>, ModelError> {
    let d = diag.len();
    if rho.len() + 1 != d {
        return Err(ModelError::InvalidParameter(format!("{} correlations for dimension {d}", rho.len())));
    }
    let mut u = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
    for (i, r) in rho.iter().enumerate() {
        let v = r * (diag[i] * diag[i + 1]).sqrt();
        u[(i, i + 1)] = v;
        u[(i + 1, i)] = v;
    }
    Ok(u)
}

impl ModelFamily {
    pub fn n_params(&self) -> usize {
        match *self {
            ModelFamily::ScalarLinearGaussian { .. } => 1,
            ModelFamily::LowerTriangularLinearGaussian { dim, .. } => dim * (dim + 1) / 2,
            ModelFamily::UnivariateSv => 3,
            ModelFamily::MultivariateSv { dim } => 4 * dim - 1,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match *self {
            ModelFamily::ScalarLinearGaussian { .. } => vec!["alpha".into()],
            ModelFamily::LowerTriangularLinearGaussian { dim, .. } => (0..dim)
                .flat_map(|i| (0..=i).map(move |j| format!("a_{}_{}", i + 1, j + 1)))
                .collect(),
            ModelFamily::UnivariateSv => vec!["alpha".into(), "sigma".into(), "beta".into()],
            ModelFamily::MultivariateSv { dim } => {
                let mut names: Vec<String> = (1..=dim).map(|i| format!("m_{i}")).collect();
                names.extend((1..=dim).map(|i| format!("phi_{i}")));
                names.extend((1..=dim).map(|i| format!("u_{i}")));
                names.extend((1..dim).map(|i| format!("rho_{i}")));
                names
            }
        }
    }

    pub fn default_priors(&self) -> Vec<Prior> {
        match *self {
            ModelFamily::ScalarLinearGaussian { .. } => vec![Prior::new(PriorKind::Flat)],
            ModelFamily::LowerTriangularLinearGaussian { .. } => {
                vec![Prior::new(PriorKind::Uniform { lo: -5.0, hi: 5.0 }); self.n_params()]
            }
            ModelFamily::UnivariateSv => vec![
                Prior::new(PriorKind::Beta { a: 20.0, b: 1.5 }),
                Prior::on_square(PriorKind::InverseGamma { shape: 2.5, scale: 0.025 }),
                Prior::on_square(PriorKind::InverseGamma { shape: 3.0, scale: 1.0 }),
            ],
            ModelFamily::MultivariateSv { dim } => {
                let mut p = vec![Prior::new(PriorKind::Flat); dim];
                p.extend(vec![Prior::new(PriorKind::Uniform { lo: 0.0, hi: 1.0 }); dim]);
                // Mean 0.2 and unit variance.
                p.extend(vec![Prior::new(PriorKind::InverseGamma { shape: 2.04, scale: 0.208 }); dim]);
                p.extend(vec![Prior::new(PriorKind::SymmetricTriangular); dim - 1]);
                p
            }
        }
    }

    /// Starting point of a chain; `observations` sets the MSV means.
    pub fn default_theta0(&self, observations: Option<&crate::hmm::Observations>) -> Vec<f64> {
        match *self {
            ModelFamily::ScalarLinearGaussian { .. } => vec![0.5],
            ModelFamily::LowerTriangularLinearGaussian { dim, .. } => (0..dim)
                .flat_map(|i| (0..=i).map(move |j| if i == j { 1.0 } else { 0.0 }))
                .collect(),
            ModelFamily::UnivariateSv => vec![0.95, 0.02f64.sqrt(), 0.5],
            ModelFamily::MultivariateSv { dim } => {
                let mut theta: Vec<f64> = match observations {
                    Some(obs) if obs.dim() == dim && obs.len() > 1 => (0..dim)
                        .map(|j| {
                            let col: Vec<f64> = (0..obs.len()).map(|t| obs.row(t)[j]).collect();
                            let mean = col.iter().sum::<f64>() / col.len() as f64;
                            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
                            0.5 * var.max(f64::MIN_POSITIVE).ln()
                        })
                        .collect(),
                    _ => vec![0.0; dim],
                };
                theta.extend(vec![0.95; dim]);
                theta.extend(vec![0.2; dim]);
                theta.extend(vec![0.25; dim - 1]);
                theta
            }
        }
    }

    pub fn default_proposal_sd(&self) -> Vec<f64> {
        match *self {
            ModelFamily::ScalarLinearGaussian { .. } | ModelFamily::LowerTriangularLinearGaussian { .. } => {
                vec![0.1f64.sqrt(); self.n_params()]
            }
            ModelFamily::UnivariateSv => vec![0.02f64.sqrt(), 0.05f64.sqrt(), 0.1f64.sqrt()],
            ModelFamily::MultivariateSv { dim } => {
                let mut sd = vec![0.2; dim];
                sd.extend(vec![0.005; dim]);
                sd.extend(vec![0.02; dim]);
                sd.extend(vec![0.02; dim - 1]);
                sd
            }
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidParameter(m));
        match *self {
            ModelFamily::ScalarLinearGaussian { delta } | ModelFamily::LowerTriangularLinearGaussian { delta, .. }
                if !(delta > 0.0 && delta.is_finite()) =>
            {
                bad(format!("delta must be positive, got {delta}"))
            }
            ModelFamily::LowerTriangularLinearGaussian { dim: 0, .. } => bad("dimension must be positive".into()),
            ModelFamily::MultivariateSv { dim } if dim < 2 => bad("MSV dimension must be at least 2".into()),
            _ => Ok(()),
        }
    }

    pub fn build(&self, theta: &[f64]) -> Result<StateSpaceModel, ModelError> {
        self.validate()?;
        if theta.len() != self.n_params() {
            return Err(ModelError::DimensionMismatch {
                what: "parameter vector",
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        match *self {
            ModelFamily::ScalarLinearGaussian { delta } => {
                let one = DMatrix::identity(1, 1);
                build_linear_gaussian(
                    DVector::zeros(1),
                    one.clone(),
                    DMatrix::from_element(1, 1, theta[0]),
                    one.clone(),
                    one,
                    DMatrix::from_element(1, 1, delta),
                )
            }
            ModelFamily::LowerTriangularLinearGaussian { dim, delta } => {
                let mut a = DMatrix::zeros(dim, dim);
                let mut k = 0;
                for i in 0..dim {
                    for j in 0..=i {
                        a[(i, j)] = theta[k];
                        k += 1;
                    }
                }
                let id = DMatrix::identity(dim, dim);
                build_linear_gaussian(DVector::zeros(dim), id.clone(), a, id.clone(), id.clone(), id * delta)
            }
            ModelFamily::UnivariateSv => build_univariate_sv(theta[0], theta[1], theta[2]),
            ModelFamily::MultivariateSv { dim } => {
                let m = DVector::from_column_slice(&theta[..dim]);
                let phi = DVector::from_column_slice(&theta[dim..2 * dim]);
                let u = tridiagonal_covariance(&theta[2 * dim..3 * dim], &theta[3 * dim..])?;
                build_multivariate_sv(m, phi, u)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::log_prior;

    #[test]
    fn shapes_agree() {
        for fam in [
            ModelFamily::ScalarLinearGaussian { delta: 0.25 },
            ModelFamily::LowerTriangularLinearGaussian { dim: 5, delta: 0.25 },
            ModelFamily::UnivariateSv,
            ModelFamily::MultivariateSv { dim: 20 },
        ] {
            let p = fam.n_params();
            assert_eq!(fam.param_names().len(), p);
            assert_eq!(fam.default_priors().len(), p);
            assert_eq!(fam.default_proposal_sd().len(), p);
            let theta0 = fam.default_theta0(None);
            assert_eq!(theta0.len(), p);
            assert!(log_prior(&fam.default_priors(), &theta0).is_finite());
            fam.build(&theta0).unwrap();
        }
        assert_eq!(ModelFamily::MultivariateSv { dim: 20 }.n_params(), 79);
        assert_eq!(ModelFamily::LowerTriangularLinearGaussian { dim: 5, delta: 0.25 }.n_params(), 15);
    }

    #[test]
    fn lower_triangular_layout() {
        let fam = ModelFamily::LowerTriangularLinearGaussian { dim: 2, delta: 0.5 };
        let model = fam.build(&[0.9, 0.3, 0.7]).unwrap();
        let lg = model.linear_gaussian().unwrap();
        assert_eq!(lg.a, nalgebra::dmatrix![0.9, 0.0; 0.3, 0.7]);
        assert_eq!(lg.d, nalgebra::dmatrix![0.5, 0.0; 0.0, 0.5]);
    }

    #[test]
    fn tridiagonal_entries() {
        let u = tridiagonal_covariance(&[1.0, 4.0, 9.0], &[0.5, -0.25]).unwrap();
        assert_eq!(u[(0, 1)], 1.0);
        assert_eq!(u[(2, 1)], -1.5);
        assert_eq!(u[(0, 2)], 0.0);
        assert!(tridiagonal_covariance(&[1.0], &[0.5]).is_err());
    }

    #[test]
    fn bad_parameters_are_errors() {
        let fam = ModelFamily::MultivariateSv { dim: 2 };
        assert!(fam.build(&[0.0, 0.0, 1.2, 0.5, 0.2, 0.2, 0.1]).is_err());
        assert!(fam.build(&[0.0; 3]).is_err());
        assert!(ModelFamily::ScalarLinearGaussian { delta: 0.0 }.build(&[0.5]).is_err());
        assert!(ModelFamily::UnivariateSv.build(&[0.5, -1.0, 1.0]).is_err());
    }
}
