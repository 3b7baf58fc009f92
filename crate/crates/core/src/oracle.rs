//! Exact references: the Kalman filter and smoother for linear-Gaussian
//! models, and one-dimensional grid quadrature for general models.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::hmm::{HmmModel, LinearGaussianParams, Observations, TransitionKernel};
use crate::math::{log_sum_exp, MathError};
use crate::twist::PsiSequence;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("model is not linear-Gaussian")]
    NotLinearGaussian,
    #[error("grid oracles need a one-dimensional state, got {0}")]
    NotOneDimensional(usize),
    #[error("{what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("covariance lost positive semi-definiteness at step {0}")]
    NotPsd(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid too coarse: transition mass on the grid is {mass}")]
    GridTooCoarse { mass: f64 },
    #[error("density vanished on the grid at step {0}")]
    Vanished(usize),
    #[error("twisting function vanishes on the grid at step {0}")]
    PsiVanishes(usize),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Equally spaced quadrature nodes on `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    lo: f64,
    hi: f64,
    n_nodes: usize,
}

impl Grid1D {
    pub const DEFAULT_NODES: usize = 2048;

    pub fn new(lo: f64, hi: f64, n_nodes: usize) -> Result<Self, OracleError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(OracleError::InvalidGrid(format!("bounds [{lo}, {hi}]")));
        }
        if n_nodes < 16 {
            return Err(OracleError::InvalidGrid(format!("{n_nodes} nodes, need at least 16")));
        }
        Ok(Self { lo, hi, n_nodes })
    }

    /// Covers the prior marginals of `x_t` over all `t` by ±`width` standard
    /// deviations. Needs a linear transition.
    pub fn covering(model: &HmmModel, width: f64, n_nodes: usize) -> Result<Self, OracleError> {
        if model.dim_state() != 1 {
            return Err(OracleError::NotOneDimensional(model.dim_state()));
        }
        let TransitionKernel::Linear(lin) = model.transition() else {
            return Err(OracleError::InvalidGrid("prior moments need a linear transition".into()));
        };
        let a = lin.map.to_matrix()[(0, 0)];
        let o = lin.offset[0];
        let b = lin.cov.to_matrix()[(0, 0)];
        let comps = model.initial().components();
        let mut mean = 0.0;
        let mut second = 0.0;
        for c in comps {
            let w = c.log_weight.exp();
            mean += w * c.mean[0];
            second += w * (c.cov.to_matrix()[(0, 0)] + c.mean[0] * c.mean[0]);
        }
        let mut var = second - mean * mean;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..model.len().max(1) {
            let sd = var.max(0.0).sqrt();
            lo = lo.min(mean - width * sd);
            hi = hi.max(mean + width * sd);
            mean = a * mean + o;
            var = a * a * var + b;
        }
        Self::new(lo, hi, n_nodes)
    }

    /// [`Grid1D::covering`] with ±10 sd and the default node count.
    pub fn default_for(model: &HmmModel) -> Result<Self, OracleError> {
        Self::covering(model, 10.0, Self::DEFAULT_NODES)
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n_nodes - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n_nodes).map(|i| self.lo + h * i as f64).collect()
    }

    /// The same interval with the spacing halved.
    pub fn refined(&self) -> Self {
        Self { n_nodes: 2 * self.n_nodes - 1, ..self.clone() }
    }

    /// Log trapezoidal weights.
    pub fn log_weights(&self) -> Vec<f64> {
        let lh = self.spacing().ln();
        let mut w = vec![lh; self.n_nodes];
        w[0] -= std::f64::consts::LN_2;
        w[self.n_nodes - 1] -= std::f64::consts::LN_2;
        w
    }
}

/// Kalman filter and Rauch–Tung–Striebel smoother output, indexed by `t`.
/// The predictive moments at `t = 0` are those of the initial distribution.
#[derive(Clone, Debug)]
pub struct KalmanResult {
    pub predicted_means: Vec<DVector<f64>>,
    pub predicted_covs: Vec<DMatrix<f64>>,
    pub filtered_means: Vec<DVector<f64>>,
    pub filtered_covs: Vec<DMatrix<f64>>,
    pub smoothed_means: Vec<DVector<f64>>,
    pub smoothed_covs: Vec<DMatrix<f64>>,
    pub log_likelihood: f64,
}

fn symmetrize_checked(p: &mut DMatrix<f64>, t: usize) -> Result<(), OracleError> {
    let sym = (&*p + p.transpose()) * 0.5;
    *p = sym;
    let scale = p.diagonal().amax().max(f64::MIN_POSITIVE);
    let min_eig = p.clone().symmetric_eigenvalues().min();
    if !min_eig.is_finite() || min_eig < -1e-10 * scale {
        return Err(OracleError::NotPsd(t));
    }
    Ok(())
}

/// Kalman filter and smoother for `x_0 ~ 𝒩(m, Σ)`, `x_t = A x_{t-1} + 𝒩(0, B)`,
/// `y_t = C x_t + 𝒩(0, D)`. The covariance update uses the Joseph form.
pub fn kalman(params: &LinearGaussianParams, observations: &Observations) -> Result<KalmanResult, OracleError> {
    let d = params.m.len();
    let p_obs = params.c.nrows();
    if observations.dim() != p_obs {
        return Err(OracleError::DimensionMismatch { what: "observation dimension", expected: p_obs, got: observations.dim() });
    }
    if params.c.ncols() != d {
        return Err(OracleError::DimensionMismatch { what: "observation matrix columns", expected: d, got: params.c.ncols() });
    }
    let len = observations.len();
    let id = DMatrix::<f64>::identity(d, d);
    let mut out = KalmanResult {
        predicted_means: Vec::with_capacity(len),
        predicted_covs: Vec::with_capacity(len),
        filtered_means: Vec::with_capacity(len),
        filtered_covs: Vec::with_capacity(len),
        smoothed_means: Vec::new(),
        smoothed_covs: Vec::new(),
        log_likelihood: 0.0,
    };
    let mut mean = params.m.clone();
    let mut cov = params.sigma.clone();
    for t in 0..len {
        if t > 0 {
            mean = &params.a * &mean;
            cov = &params.a * &cov * params.a.transpose() + &params.b;
            symmetrize_checked(&mut cov, t)?;
        }
        out.predicted_means.push(mean.clone());
        out.predicted_covs.push(cov.clone());

        let y = DVector::from_column_slice(observations.row(t));
        let innov = &y - &params.c * &mean;
        let s = &params.c * &cov * params.c.transpose() + &params.d;
        let s = (&s + s.transpose()) * 0.5;
        let chol = s.clone().cholesky().ok_or(OracleError::NotPsd(t))?;
        let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        let sol = chol.solve(&innov);
        out.log_likelihood += -0.5 * (p_obs as f64 * LN_2PI + log_det + innov.dot(&sol));

        let gain = chol.solve(&(&params.c * &cov)).transpose();
        mean = &mean + &gain * innov;
        let ikc = &id - &gain * &params.c;
        cov = &ikc * &cov * ikc.transpose() + &gain * &params.d * gain.transpose();
        symmetrize_checked(&mut cov, t)?;
        out.filtered_means.push(mean.clone());
        out.filtered_covs.push(cov.clone());
    }

    let mut sm = out.filtered_means.clone();
    let mut sc = out.filtered_covs.clone();
    for t in (0..len.saturating_sub(1)).rev() {
        let pred = &out.predicted_covs[t + 1];
        let chol = pred.clone().cholesky().ok_or(OracleError::NotPsd(t + 1))?;
        // G = P_t Aᵀ P_{t+1|t}⁻¹
        let g = chol.solve(&(&params.a * &out.filtered_covs[t])).transpose();
        sm[t] = &out.filtered_means[t] + &g * (&sm[t + 1] - &out.predicted_means[t + 1]);
        let mut c = &out.filtered_covs[t] + &g * (&sc[t + 1] - pred) * g.transpose();
        symmetrize_checked(&mut c, t)?;
        sc[t] = c;
    }
    out.smoothed_means = sm;
    out.smoothed_covs = sc;
    Ok(out)
}

/// [`kalman`] on a bound linear-Gaussian model.
pub fn kalman_log_likelihood(model: &HmmModel) -> Result<KalmanResult, OracleError> {
    let params = model.linear_gaussian().ok_or(OracleError::NotLinearGaussian)?;
    kalman(params, model.observations())
}

/// Log-domain tables shared by the grid routines.
struct GridTables {
    lw: Vec<f64>,
    /// `log f(x_i, x_j)`, row-major by `i`.
    log_f: Vec<f64>,
    log_mu: Vec<f64>,
    /// `log g(x_i, y_t)` per `t`.
    log_g: Vec<Vec<f64>>,
    n: usize,
}

impl GridTables {
    fn new(model: &HmmModel, grid: &Grid1D) -> Result<Self, OracleError> {
        if model.dim_state() != 1 {
            return Err(OracleError::NotOneDimensional(model.dim_state()));
        }
        let nodes = grid.nodes();
        let n = nodes.len();
        let lw = grid.log_weights();
        let kernel = model.transition();
        let mut scratch = Vec::new();
        let mut log_f = vec![0.0; n * n];
        for (i, xi) in nodes.iter().enumerate() {
            for (j, xj) in nodes.iter().enumerate() {
                log_f[i * n + j] = kernel.log_density(&[*xi], &[*xj], &mut scratch);
            }
        }
        let mid = n / 2;
        let mass = log_sum_exp(&(0..n).map(|j| log_f[mid * n + j] + lw[j]).collect::<Vec<_>>()).exp();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(OracleError::GridTooCoarse { mass });
        }
        let log_mu = nodes.iter().map(|x| model.initial().log_density(&[*x], &mut scratch)).collect();
        let log_g = (0..model.len())
            .map(|t| nodes.iter().map(|x| model.log_g(t, &[*x])).collect())
            .collect();
        Ok(Self { lw, log_f, log_mu, log_g, n })
    }

    fn log_integral(&self, v: &[f64]) -> f64 {
        let terms: Vec<f64> = v.iter().zip(&self.lw).map(|(a, b)| a + b).collect();
        log_sum_exp(&terms)
    }

    /// `out_j = log Σ_i w_i exp(v_i) f(x_i, x_j)`.
    fn forward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let src: Vec<f64> = v.iter().zip(&self.lw).map(|(a, b)| a + b).collect();
        let mut terms = vec![0.0; n];
        (0..n)
            .map(|j| {
                for i in 0..n {
                    terms[i] = src[i] + self.log_f[i * n + j];
                }
                log_sum_exp(&terms)
            })
            .collect()
    }

    /// `out_i = log Σ_j f(x_i, x_j) w_j exp(v_j)`.
    fn backward(&self, v: &[f64]) -> Vec<f64> {
        let n = self.n;
        let src: Vec<f64> = v.iter().zip(&self.lw).map(|(a, b)| a + b).collect();
        let mut terms = vec![0.0; n];
        (0..n)
            .map(|i| {
                let row = &self.log_f[i * n..(i + 1) * n];
                for j in 0..n {
                    terms[j] = src[j] + row[j];
                }
                log_sum_exp(&terms)
            })
            .collect()
    }

    fn normalized(&self, v: &mut [f64], t: usize) -> Result<f64, OracleError> {
        let z = self.log_integral(v);
        if !z.is_finite() {
            return Err(OracleError::Vanished(t));
        }
        for x in v.iter_mut() {
            *x -= z;
        }
        Ok(z)
    }

    /// Normalized log predictive densities `p(x_t | y_{0:t-1})`, filtering
    /// densities, and the log-likelihood.
    fn filter(&self) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64), OracleError> {
        let len = self.log_g.len();
        let mut preds = Vec::with_capacity(len);
        let mut filts: Vec<Vec<f64>> = Vec::with_capacity(len);
        let mut log_z = 0.0;
        for t in 0..len {
            let mut pred = if t == 0 { self.log_mu.clone() } else { self.forward(&filts[t - 1]) };
            self.normalized(&mut pred, t)?;
            let mut filt: Vec<f64> = pred.iter().zip(&self.log_g[t]).map(|(a, b)| a + b).collect();
            log_z += self.normalized(&mut filt, t)?;
            preds.push(pred);
            filts.push(filt);
        }
        Ok((preds, filts, log_z))
    }

    fn psi_star(&self) -> Vec<Vec<f64>> {
        let len = self.log_g.len();
        let mut rows: Vec<Vec<f64>> = vec![Vec::new(); len];
        for t in (0..len).rev() {
            rows[t] = if t + 1 == len {
                self.log_g[t].clone()
            } else {
                let next = self.backward(&rows[t + 1]);
                next.iter().zip(&self.log_g[t]).map(|(a, b)| a + b).collect()
            };
        }
        rows
    }
}

/// `log Z` by forward quadrature.
pub fn grid_log_likelihood_1d(model: &HmmModel, grid: &Grid1D) -> Result<f64, OracleError> {
    let tables = GridTables::new(model, grid)?;
    Ok(tables.filter()?.2)
}

/// The optimal twisting functions tabulated on grid nodes.
#[derive(Clone, Debug)]
pub struct GridPsiStar {
    pub nodes: Vec<f64>,
    /// `log ψ*_t(node_i)` for each `t`.
    pub log_psi: Vec<Vec<f64>>,
    /// `log ∫ μ ψ*_0`, which equals `log Z`.
    pub log_psi_tilde_0: f64,
}

/// Backward quadrature of `ψ*_t(x) = g(x, y_t) f(x, ψ*_{t+1})`, `ψ*_{T-1} = g`.
pub fn grid_backward_psi_star_1d(model: &HmmModel, grid: &Grid1D) -> Result<GridPsiStar, OracleError> {
    let tables = GridTables::new(model, grid)?;
    let log_psi = tables.psi_star();
    let first: Vec<f64> = tables.log_mu.iter().zip(&log_psi[0]).map(|(a, b)| a + b).collect();
    let log_psi_tilde_0 = tables.log_integral(&first);
    Ok(GridPsiStar { nodes: grid.nodes(), log_psi, log_psi_tilde_0 })
}

/// Per-step terms of the asymptotic variance by two routes.
#[derive(Clone, Debug)]
pub struct VarianceTerms {
    /// `∫ π_T^ψ(x_t)² / π_{t-1}^ψ(x_t) dx_t − 1` from the twisted model.
    pub literal: Vec<f64>,
    /// `E[ψ*_t/ψ_t | y_{0:T-1}] · E[ψ_t | y_{0:t-1}] / E[ψ*_t | y_{0:t-1}] − 1`.
    pub expectation_form: Vec<f64>,
}

impl VarianceTerms {
    pub fn literal_sum(&self) -> f64 {
        self.literal.iter().sum()
    }

    pub fn expectation_sum(&self) -> f64 {
        self.expectation_form.iter().sum()
    }
}

fn tabulate(psi: &PsiSequence, nodes: &[f64]) -> Vec<Vec<f64>> {
    let mut scratch = Vec::new();
    psi.iter()
        .map(|p| nodes.iter().map(|x| p.eval_log_slice(&[*x], &mut scratch)).collect())
        .collect()
}

fn check_table(table: &[Vec<f64>], len: usize, n: usize) -> Result<(), OracleError> {
    if table.len() != len {
        return Err(OracleError::DimensionMismatch { what: "twisting sequence length", expected: len, got: table.len() });
    }
    for (t, row) in table.iter().enumerate() {
        if row.len() != n {
            return Err(OracleError::DimensionMismatch { what: "tabulated nodes", expected: n, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::PsiVanishes(t));
        }
    }
    Ok(())
}

/// `log ∫ exp(a)² / exp(b)` over the nodes where `a` is non-negligible.
fn log_ratio_integral(tables: &GridTables, a: &[f64], b: &[f64], t: usize) -> Result<f64, OracleError> {
    let mut v = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        if *x == f64::NEG_INFINITY {
            v.push(f64::NEG_INFINITY);
        } else if *y == f64::NEG_INFINITY {
            return Err(OracleError::Vanished(t));
        } else {
            v.push(2.0 * x - y);
        }
    }
    Ok(tables.log_integral(&v))
}

/// Both routes for the asymptotic variance of the ψ-APF with `ψ` given as
/// log-values on the grid nodes.
pub fn grid_variance_terms_tabulated(model: &HmmModel, grid: &Grid1D, log_psi: &[Vec<f64>]) -> Result<VarianceTerms, OracleError> {
    let tables = GridTables::new(model, grid)?;
    let len = model.len();
    let n = tables.n;
    check_table(log_psi, len, n)?;

    // Twisted model on the grid.
    let first: Vec<f64> = tables.log_mu.iter().zip(&log_psi[0]).map(|(a, b)| a + b).collect();
    let log_tilde_0 = tables.log_integral(&first);
    let log_mu_twisted: Vec<f64> = first.iter().map(|v| v - log_tilde_0).collect();
    let log_tilde: Vec<Vec<f64>> = (0..len)
        .map(|t| if t + 1 < len { tables.backward(&log_psi[t + 1]) } else { vec![0.0; n] })
        .collect();
    let log_g_twisted: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            (0..n)
                .map(|i| {
                    let base = tables.log_g[t][i] + log_tilde[t][i] - log_psi[t][i];
                    if t == 0 { base + log_tilde_0 } else { base }
                })
                .collect()
        })
        .collect();
    // f^ψ_t(x_i, x_j) = f(x_i, x_j) ψ_t(x_j) / ψ̃_{t-1}(x_i), applied through
    // the untwisted table with the two factors moved onto the vectors.
    let twisted_forward = |v: &[f64], t: usize| -> Vec<f64> {
        let src: Vec<f64> = v.iter().zip(&log_tilde[t - 1]).map(|(a, b)| a - b).collect();
        tables.forward(&src).iter().zip(&log_psi[t]).map(|(a, b)| a + b).collect()
    };
    let twisted_backward = |v: &[f64], t: usize| -> Vec<f64> {
        let src: Vec<f64> = v.iter().zip(&log_psi[t]).map(|(a, b)| a + b).collect();
        tables.backward(&src).iter().zip(&log_tilde[t - 1]).map(|(a, b)| a - b).collect()
    };

    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(len);
    let mut filts: Vec<Vec<f64>> = Vec::with_capacity(len);
    for t in 0..len {
        let mut pred = if t == 0 { log_mu_twisted.clone() } else { twisted_forward(&filts[t - 1], t) };
        tables.normalized(&mut pred, t)?;
        let mut filt: Vec<f64> = pred.iter().zip(&log_g_twisted[t]).map(|(a, b)| a + b).collect();
        tables.normalized(&mut filt, t)?;
        preds.push(pred);
        filts.push(filt);
    }
    let mut beta = vec![0.0; n];
    let mut literal = vec![0.0; len];
    for t in (0..len).rev() {
        if t + 1 < len {
            let v: Vec<f64> = beta.iter().zip(&log_g_twisted[t + 1]).map(|(a, b)| a + b).collect();
            beta = twisted_backward(&v, t + 1);
        }
        let mut smooth: Vec<f64> = filts[t].iter().zip(&beta).map(|(a, b)| a + b).collect();
        tables.normalized(&mut smooth, t)?;
        literal[t] = log_ratio_integral(&tables, &smooth, &preds[t], t)?.exp() - 1.0;
    }

    // Untwisted route through ψ*.
    let (upreds, _, _) = tables.filter()?;
    let star = tables.psi_star();
    let mut expectation_form = Vec::with_capacity(len);
    for t in 0..len {
        let mut smooth: Vec<f64> = upreds[t].iter().zip(&star[t]).map(|(a, b)| a + b).collect();
        tables.normalized(&mut smooth, t)?;
        let ratio: Vec<f64> = (0..n).map(|i| smooth[i] + star[t][i] - log_psi[t][i]).collect();
        let e_ratio = tables.log_integral(&ratio);
        let e_psi = tables.log_integral(&upreds[t].iter().zip(&log_psi[t]).map(|(a, b)| a + b).collect::<Vec<_>>());
        let e_star = tables.log_integral(&upreds[t].iter().zip(&star[t]).map(|(a, b)| a + b).collect::<Vec<_>>());
        expectation_form.push((e_ratio + e_psi - e_star).exp() - 1.0);
    }
    Ok(VarianceTerms { literal, expectation_form })
}

/// [`grid_variance_terms_tabulated`] for a parametric sequence.
pub fn grid_variance_terms_1d(model: &HmmModel, psi: &PsiSequence, grid: &Grid1D) -> Result<VarianceTerms, OracleError> {
    if psi.dim() != 1 {
        return Err(OracleError::NotOneDimensional(psi.dim()));
    }
    let table = tabulate(psi, &grid.nodes());
    grid_variance_terms_tabulated(model, grid, &table)
}

/// Asymptotic variance `σ²_ψ` of `√N (Z^N_ψ / Z − 1)`.
pub fn grid_asymptotic_variance_1d(model: &HmmModel, psi: &PsiSequence, grid: &Grid1D) -> Result<f64, OracleError> {
    Ok(grid_variance_terms_1d(model, psi, grid)?.literal_sum())
}

/// Bootstrap filter variance `Σ_t {E[ψ̄*_t | y_{0:T-1}] − 1}` with
/// `ψ̄*_t = ψ*_t / E[ψ*_t | y_{0:t-1}]`.
pub fn grid_bpf_asymptotic_variance_1d(model: &HmmModel, grid: &Grid1D) -> Result<f64, OracleError> {
    let tables = GridTables::new(model, grid)?;
    let (preds, filts, _) = tables.filter()?;
    let star = tables.psi_star();
    let len = model.len();
    // Smoothing marginals by the standard forward-filter backward-information
    // split: p(x_t | y) ∝ p(x_t | y_{0:t}) f(x_t, ψ*_{t+1}).
    let mut total = 0.0;
    for t in 0..len {
        let mut smooth = filts[t].clone();
        if t + 1 < len {
            for (s, b) in smooth.iter_mut().zip(tables.backward(&star[t + 1])) {
                *s += b;
            }
        }
        tables.normalized(&mut smooth, t)?;
        let pred_star = tables.log_integral(&preds[t].iter().zip(&star[t]).map(|(a, b)| a + b).collect::<Vec<_>>());
        let bar: Vec<f64> = (0..tables.n).map(|i| smooth[i] + star[t][i] - pred_star).collect();
        total += tables.log_integral(&bar).exp() - 1.0;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{build_linear_gaussian, build_univariate_sv};
    use crate::seed::rng_from_seed;
    use crate::twist::exact_psi_star_lgssm;
    use nalgebra::{dmatrix, dvector};

    fn lg(a: f64, b: f64, c: f64, d: f64, len: usize, seed: u64) -> HmmModel {
        let space = build_linear_gaussian(dvector![0.3], dmatrix![1.2], dmatrix![a], dmatrix![b], dmatrix![c], dmatrix![d]).unwrap();
        let (_, obs) = space.simulate(len, &mut rng_from_seed(seed));
        space.bind(obs).unwrap()
    }

    #[test]
    fn single_step_closed_form() {
        let space = build_linear_gaussian(dvector![0.0], dmatrix![1.0], dmatrix![0.5], dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let model = space.bind(Observations::from_flat(1, vec![0.0]).unwrap()).unwrap();
        let k = kalman_log_likelihood(&model).unwrap();
        assert!((k.log_likelihood + 1.265_512_123_484_645_4).abs() < 1e-12);
        let g = grid_log_likelihood_1d(&model, &Grid1D::default_for(&model).unwrap()).unwrap();
        assert!((g - k.log_likelihood).abs() < 1e-10);
    }

    #[test]
    fn kalman_matches_grid() {
        let model = lg(0.8, 0.6, 1.3, 0.7, 10, 4);
        let k = kalman_log_likelihood(&model).unwrap();
        let grid = Grid1D::default_for(&model).unwrap();
        let g = grid_log_likelihood_1d(&model, &grid).unwrap();
        assert!((g - k.log_likelihood).abs() < 1e-8, "{g} vs {}", k.log_likelihood);
        let g2 = grid_log_likelihood_1d(&model, &grid.refined()).unwrap();
        assert!((g2 - g).abs() < 1e-9);
    }

    #[test]
    fn kalman_moments_match_brute_force() {
        // Joint Gaussian of (x_0, x_1, x_2) conditioned on y by dense algebra.
        let (a, b, c, d) = (0.7, 0.5, 1.1, 0.9);
        let model = lg(a, b, c, d, 3, 9);
        let k = kalman_log_likelihood(&model).unwrap();
        let mut cx = DMatrix::zeros(3, 3);
        let mut v = [1.2, 0.0, 0.0];
        let mx = DVector::from_vec(vec![0.3, 0.3 * a, 0.3 * a * a]);
        v[1] = a * a * v[0] + b;
        v[2] = a * a * v[1] + b;
        for i in 0..3 {
            for j in 0..3 {
                let (lo, hi) = (i.min(j), i.max(j));
                cx[(i, j)] = a.powi((hi - lo) as i32) * v[lo];
            }
        }
        let y = DVector::from_column_slice(&[model.observations().row(0)[0], model.observations().row(1)[0], model.observations().row(2)[0]]);
        let cy = &cx * c * c + DMatrix::identity(3, 3) * d;
        let cxy = &cx * c;
        let inv = cy.clone().try_inverse().unwrap();
        let post_mean = &mx + &cxy * &inv * (&y - &mx * c);
        let post_cov = &cx - &cxy * &inv * cxy.transpose();
        for t in 0..3 {
            assert!((k.smoothed_means[t][0] - post_mean[t]).abs() < 1e-12);
            assert!((k.smoothed_covs[t][(0, 0)] - post_cov[(t, t)]).abs() < 1e-12);
        }
        let log_l = -0.5 * (3.0 * LN_2PI + cy.determinant().ln() + (&y - &mx * c).dot(&(&inv * (&y - &mx * c))));
        assert!((k.log_likelihood - log_l).abs() < 1e-12);
    }

    #[test]
    fn mismatched_observation_dimension() {
        let model = lg(0.8, 0.6, 1.3, 0.7, 4, 1);
        let obs = Observations::from_flat(2, vec![0.0; 8]).unwrap();
        assert!(matches!(
            kalman(model.linear_gaussian().unwrap(), &obs),
            Err(OracleError::DimensionMismatch { .. })
        ));
        let sv = build_univariate_sv(0.9, 0.3, 0.7).unwrap().bind(Observations::from_flat(1, vec![0.1]).unwrap()).unwrap();
        assert!(matches!(kalman_log_likelihood(&sv), Err(OracleError::NotLinearGaussian)));
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(1.0, 0.0, 100).is_err());
        assert!(Grid1D::new(0.0, 1.0, 8).is_err());
        let model = lg(0.8, 0.6, 1.3, 0.7, 4, 1);
        let coarse = Grid1D::new(-50.0, 50.0, 16).unwrap();
        assert!(matches!(grid_log_likelihood_1d(&model, &coarse), Err(OracleError::GridTooCoarse { .. })));
    }

    #[test]
    fn grid_psi_star_matches_closed_form() {
        let model = lg(0.9, 0.4, 1.0, 0.5, 20, 7);
        let grid = Grid1D::default_for(&model).unwrap();
        let tab = grid_backward_psi_star_1d(&model, &grid).unwrap();
        let exact = exact_psi_star_lgssm(&model, true).unwrap();
        let mut s = Vec::new();
        for t in 0..20 {
            for (i, x) in tab.nodes.iter().enumerate() {
                let e = exact.psi.get(t).eval_log_slice(&[*x], &mut s);
                assert!((tab.log_psi[t][i] - e).abs() < 1e-6, "t={t} x={x}");
            }
        }
        let last = model.len() - 1;
        for (i, x) in tab.nodes.iter().enumerate() {
            assert_eq!(tab.log_psi[last][i], model.log_g(last, &[*x]));
        }
        let k = kalman_log_likelihood(&model).unwrap().log_likelihood;
        assert!((tab.log_psi_tilde_0 - k).abs() < 1e-8);
        assert!((exact.log_psi_tilde_0 - k).abs() < 1e-8);
    }

    #[test]
    fn sv_grid_is_refinement_stable() {
        let space = build_univariate_sv(0.95, 0.3, 0.7).unwrap();
        let (_, obs) = space.simulate(8, &mut rng_from_seed(3));
        let model = space.bind(obs).unwrap();
        let grid = Grid1D::default_for(&model).unwrap();
        let a = grid_log_likelihood_1d(&model, &grid).unwrap();
        let b = grid_log_likelihood_1d(&model, &grid.refined()).unwrap();
        assert!(a.is_finite() && (a - b).abs() < 1e-9);
    }

    #[test]
    fn variance_routes_agree() {
        let model = lg(0.8, 0.5, 1.0, 0.8, 5, 2);
        let grid = Grid1D::new(-12.0, 12.0, 1024).unwrap();
        let star = grid_backward_psi_star_1d(&model, &grid).unwrap();
        let zero = grid_variance_terms_tabulated(&model, &grid, &star.log_psi).unwrap();
        assert!(zero.literal_sum().abs() < 1e-8 && zero.expectation_sum().abs() < 1e-8);

        let constant = PsiSequence::constant(5, 1);
        let terms = grid_variance_terms_1d(&model, &constant, &grid).unwrap();
        let bpf = grid_bpf_asymptotic_variance_1d(&model, &grid).unwrap();
        assert!((terms.literal_sum() - bpf).abs() < 1e-8);
        assert!((terms.expectation_sum() - bpf).abs() < 1e-8);
        assert!(bpf > 0.0);

        // ψ_s = (1 − s) + s ψ*/max ψ*, linear between a constant and ψ*.
        let mut last = f64::INFINITY;
        for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let table: Vec<Vec<f64>> = star
                .log_psi
                .iter()
                .map(|row| {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.iter().map(|v| ((1.0 - s) + s * (v - max).exp()).ln()).collect()
                })
                .collect();
            let v = grid_variance_terms_tabulated(&model, &grid, &table).unwrap();
            assert!((v.literal_sum() - v.expectation_sum()).abs() < 1e-8);
            assert!(v.literal_sum() >= -1e-8 && v.literal_sum() < last);
            last = v.literal_sum();
        }
    }
}
