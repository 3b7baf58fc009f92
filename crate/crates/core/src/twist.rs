//! Twisting functions and twisted models.
//!
//! A [`PsiFunction`] is `exp(log_scale)·(C + Σ_k c_k 𝒩(x; a_k, b_k))`. A
//! [`TwistedModel`] materializes the twisted initial law `μ^ψ`, the twisted
//! kernels `f^ψ_t` and the twisted potentials `g^ψ_t` for a model and a
//! sequence `ψ_{0..T}` (zero-based; `ψ_T ≡ 1` implicitly).
//!
//! The twisted kernel at step `t ≥ 1` moves `x_{t-1}` to `x_t`:
//! `f^ψ_t(x, x') = f(x, x') ψ_t(x') / ψ̃_{t-1}(x)` with `ψ̃_{t-1}(x) = f(x, ψ_t)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hmm::{HmmModel, InfoGaussian, LinearTransition, ModelError, TransitionKernel};
use crate::math::{
    gaussian_product, log_sum_exp, Covariance, GaussianComponent, GaussianMixture, MathError,
    ProductPlan, LN_2PI,
};

#[derive(Debug, Error)]
pub enum TwistError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("constant term must be finite and non-negative, got {0}")]
    NegativeConstant(f64),
    #[error("a twisting function needs a positive constant or at least one component")]
    Empty,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("model is not linear-Gaussian")]
    NotLinearGaussian,
    #[error("observation density at t={t} is not representable in the twisting class: {reason}")]
    Unrepresentable { t: usize, reason: String },
    #[error("malformed twisting document: {0}")]
    Format(String),
}

/// `exp(log_scale)·(C + Σ_k exp(log_weight_k)·𝒩(x; mean_k, cov_k))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiFunction {
    constant: f64,
    components: Vec<GaussianComponent>,
    log_scale: f64,
    dim: usize,
}

impl PsiFunction {
    pub fn new(dim: usize, constant: f64, components: Vec<GaussianComponent>) -> Result<Self, TwistError> {
        if !(constant >= 0.0 && constant.is_finite()) {
            return Err(TwistError::NegativeConstant(constant));
        }
        if constant == 0.0 && components.is_empty() {
            return Err(TwistError::Empty);
        }
        for c in &components {
            if c.dim() != dim {
                return Err(TwistError::DimensionMismatch {
                    what: "psi component",
                    expected: dim,
                    got: c.dim(),
                });
            }
            if !c.log_weight.is_finite() {
                return Err(TwistError::Format("component log-weight must be finite".into()));
            }
        }
        Ok(Self {
            constant,
            components,
            log_scale: 0.0,
            dim,
        })
    }

    /// The constant function one.
    pub fn one(dim: usize) -> Self {
        Self {
            constant: 1.0,
            components: Vec::new(),
            log_scale: 0.0,
            dim,
        }
    }

    pub fn with_log_scale(mut self, log_scale: f64) -> Self {
        self.log_scale = log_scale;
        self
    }

    /// Multiplies the function by `exp(log_factor)`.
    pub fn rescaled(&self, log_factor: f64) -> Self {
        let mut out = self.clone();
        out.log_scale += log_factor;
        out
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_constant(&self) -> bool {
        self.components.is_empty()
    }

    /// `log ψ(x)` without dimension checks.
    pub fn eval_log_slice(&self, x: &[f64], scratch: &mut Vec<f64>) -> f64 {
        if self.components.is_empty() {
            return self.log_scale + self.constant.ln();
        }
        if self.constant == 0.0 && self.components.len() == 1 {
            let c = &self.components[0];
            return self.log_scale + c.log_weight + c.log_density(x, scratch);
        }
        let mut max = if self.constant > 0.0 {
            self.constant.ln()
        } else {
            f64::NEG_INFINITY
        };
        let mut vals = [0.0f64; 8];
        let mut heap = Vec::new();
        let terms: &mut [f64] = if self.components.len() <= 8 {
            &mut vals[..self.components.len()]
        } else {
            heap.resize(self.components.len(), 0.0);
            &mut heap
        };
        for (v, c) in terms.iter_mut().zip(&self.components) {
            *v = c.log_weight + c.log_density(x, scratch);
            max = max.max(*v);
        }
        if max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let mut s = if self.constant > 0.0 {
            (self.constant.ln() - max).exp()
        } else {
            0.0
        };
        for v in terms.iter() {
            s += (v - max).exp();
        }
        self.log_scale + max + s.ln()
    }

    /// `log ψ(x)`.
    pub fn eval_log(&self, x: &DVector<f64>) -> Result<f64, TwistError> {
        if x.len() != self.dim {
            return Err(TwistError::DimensionMismatch {
                what: "psi argument",
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_log_slice(x.as_slice(), &mut Vec::with_capacity(self.dim)))
    }

    fn to_record(&self) -> PsiRecord {
        PsiRecord {
            constant: self.constant,
            log_scale: self.log_scale,
            components: self
                .components
                .iter()
                .map(|c| ComponentRecord {
                    mean: c.mean.iter().copied().collect(),
                    covariance: if c.cov.is_diagonal() {
                        CovarianceRecord::Diagonal(c.cov.variances().iter().copied().collect())
                    } else {
                        let m = c.cov.to_matrix();
                        CovarianceRecord::Dense(m.row_iter().map(|r| r.iter().copied().collect()).collect())
                    },
                    log_weight: c.log_weight,
                })
                .collect(),
        }
    }

    fn from_record(dim: usize, rec: PsiRecord) -> Result<Self, TwistError> {
        let mut comps = Vec::with_capacity(rec.components.len());
        for c in rec.components {
            let cov = match c.covariance {
                CovarianceRecord::Diagonal(v) => Covariance::diagonal(DVector::from_vec(v))?,
                CovarianceRecord::Dense(rows) => {
                    let n = rows.len();
                    if rows.iter().any(|r| r.len() != n) {
                        return Err(TwistError::Format("dense covariance must be square".into()));
                    }
                    Covariance::dense(DMatrix::from_fn(n, n, |i, j| rows[i][j]))?
                }
            };
            comps.push(GaussianComponent::new(DVector::from_vec(c.mean), cov, c.log_weight)?);
        }
        if !rec.log_scale.is_finite() {
            return Err(TwistError::Format("log_scale must be finite".into()));
        }
        Ok(PsiFunction::new(dim, rec.constant, comps)?.with_log_scale(rec.log_scale))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsiRecord {
    constant: f64,
    log_scale: f64,
    components: Vec<ComponentRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentRecord {
    mean: Vec<f64>,
    covariance: CovarianceRecord,
    log_weight: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum CovarianceRecord {
    Diagonal(Vec<f64>),
    Dense(Vec<Vec<f64>>),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    dim: usize,
    psi: Vec<PsiRecord>,
}

/// `ψ_0, …, ψ_{T-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiSequence {
    psis: Vec<PsiFunction>,
    dim: usize,
}

impl PsiSequence {
    pub fn new(psis: Vec<PsiFunction>) -> Result<Self, TwistError> {
        let Some(first) = psis.first() else {
            return Err(TwistError::Format("sequence must be non-empty".into()));
        };
        let dim = first.dim();
        if let Some(p) = psis.iter().find(|p| p.dim() != dim) {
            return Err(TwistError::DimensionMismatch {
                what: "psi sequence",
                expected: dim,
                got: p.dim(),
            });
        }
        Ok(Self { psis, dim })
    }

    /// `T` copies of the constant function one.
    pub fn constant(len: usize, dim: usize) -> Self {
        Self {
            psis: vec![PsiFunction::one(dim); len.max(1)],
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.psis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psis.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, t: usize) -> &PsiFunction {
        &self.psis[t]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PsiFunction> {
        self.psis.iter()
    }

    /// Multiplies `ψ_t` by `exp(log_factors[t])`.
    pub fn rescaled(&self, log_factors: &[f64]) -> Self {
        Self {
            psis: self
                .psis
                .iter()
                .zip(log_factors)
                .map(|(p, f)| p.rescaled(*f))
                .collect(),
            dim: self.dim,
        }
    }

    pub fn to_json(&self) -> String {
        let rec = SequenceRecord {
            dim: self.dim,
            psi: self.psis.iter().map(PsiFunction::to_record).collect(),
        };
        serde_json::to_string_pretty(&rec).expect("plain numeric document")
    }

    pub fn from_json(text: &str) -> Result<Self, TwistError> {
        let rec: SequenceRecord = serde_json::from_str(text).map_err(|e| TwistError::Format(e.to_string()))?;
        let psis = rec
            .psi
            .into_iter()
            .map(|p| PsiFunction::from_record(rec.dim, p))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(psis)
    }
}

impl<'a> IntoIterator for &'a PsiSequence {
    type Item = &'a PsiFunction;
    type IntoIter = std::slice::Iter<'a, PsiFunction>;

    fn into_iter(self) -> Self::IntoIter {
        self.psis.iter()
    }
}

#[derive(Clone, Debug)]
enum TwistedStep {
    Linear { plans: Vec<ProductPlan> },
    General,
}

/// Reusable buffers for per-particle twisted-kernel evaluation.
#[derive(Clone, Debug, Default)]
pub struct TwistWorkspace {
    mean: Vec<f64>,
    product_mean: Vec<f64>,
    terms: Vec<f64>,
    scratch: Vec<f64>,
    general: Vec<(f64, GaussianComponent)>,
}

impl TwistWorkspace {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            product_mean: vec![0.0; dim],
            terms: Vec::new(),
            scratch: Vec::with_capacity(dim),
            general: Vec::new(),
        }
    }
}

/// A model twisted by a sequence `ψ`.
#[derive(Clone, Debug)]
pub struct TwistedModel<'a> {
    model: &'a HmmModel,
    psi: &'a PsiSequence,
    initial: GaussianMixture,
    log_psi_tilde_0: f64,
    steps: Vec<TwistedStep>,
}

/// Components of `ρ(·)ψ(·)` for a mixture `ρ`, as (log-weight, component)
/// pairs whose weights sum to `∫ρψ / exp(ψ.log_scale)`.
fn twist_mixture(
    base: &[GaussianComponent],
    psi: &PsiFunction,
) -> Result<Vec<(f64, GaussianComponent)>, MathError> {
    let mut out = Vec::with_capacity(base.len() * (psi.components().len() + 1));
    for b in base {
        if psi.constant() > 0.0 {
            out.push((b.log_weight + psi.constant().ln(), b.clone()));
        }
        for c in psi.components() {
            let (ls, comp) = gaussian_product(b, c)?;
            out.push((b.log_weight + c.log_weight + ls, comp));
        }
    }
    Ok(out)
}

fn normalized_mixture(parts: Vec<(f64, GaussianComponent)>) -> Result<GaussianMixture, MathError> {
    GaussianMixture::new(
        parts
            .into_iter()
            .map(|(lw, mut c)| {
                c.log_weight = lw;
                c
            })
            .collect(),
    )
}

impl<'a> TwistedModel<'a> {
    pub fn new(model: &'a HmmModel, psi: &'a PsiSequence) -> Result<Self, TwistError> {
        let d = model.dim_state();
        if psi.len() != model.len() {
            return Err(TwistError::DimensionMismatch {
                what: "psi sequence length",
                expected: model.len(),
                got: psi.len(),
            });
        }
        if psi.dim() != d {
            return Err(TwistError::DimensionMismatch {
                what: "psi dimension",
                expected: d,
                got: psi.dim(),
            });
        }
        let parts = twist_mixture(model.initial().components(), psi.get(0))?;
        let lws: Vec<f64> = parts.iter().map(|p| p.0).collect();
        let log_psi_tilde_0 = psi.get(0).log_scale() + log_sum_exp(&lws);
        let initial = normalized_mixture(parts)?;
        let mut steps = Vec::with_capacity(model.len().saturating_sub(1));
        for t in 1..model.len() {
            let step = match model.transition() {
                TransitionKernel::Linear(lin) => TwistedStep::Linear {
                    plans: psi
                        .get(t)
                        .components()
                        .iter()
                        .map(|c| ProductPlan::new(&lin.cov, &c.cov))
                        .collect::<Result<_, _>>()?,
                },
                TransitionKernel::Mixture(_) => TwistedStep::General,
            };
            steps.push(step);
        }
        Ok(Self {
            model,
            psi,
            initial,
            log_psi_tilde_0,
            steps,
        })
    }

    pub fn model(&self) -> &HmmModel {
        self.model
    }

    pub fn psi(&self) -> &PsiSequence {
        self.psi
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.model.dim_state()
    }

    /// `log ψ̃_0 = log ∫ μ ψ_0`.
    pub fn log_psi_tilde_0(&self) -> f64 {
        self.log_psi_tilde_0
    }

    /// `μ^ψ`.
    pub fn initial(&self) -> &GaussianMixture {
        &self.initial
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        self.initial.sample_into(rng, out);
    }

    pub fn log_initial_density(&self, x: &[f64], ws: &mut TwistWorkspace) -> f64 {
        self.initial.log_density(x, &mut ws.scratch)
    }

    /// Fills `ws.terms` with the unnormalized log-weights of the components
    /// of `f^ψ_t(x, ·)` and returns `log ψ̃_{t-1}(x)`.
    fn kernel_terms(&self, t: usize, x: &[f64], ws: &mut TwistWorkspace) -> f64 {
        let psi = self.psi.get(t);
        ws.terms.clear();
        match (&self.steps[t - 1], self.model.transition()) {
            (TwistedStep::Linear { plans }, TransitionKernel::Linear(lin)) => {
                lin.mean_into(x, &mut ws.mean);
                if psi.constant() > 0.0 {
                    ws.terms.push(psi.constant().ln());
                }
                for (plan, c) in plans.iter().zip(psi.components()) {
                    ws.terms
                        .push(c.log_weight + plan.log_scale(&ws.mean, c.mean.as_slice(), &mut ws.scratch));
                }
            }
            (_, kernel) => {
                let base = kernel.components(x);
                ws.general = twist_mixture(&base, psi).expect("kernel and psi covariances are valid");
                ws.terms.extend(ws.general.iter().map(|p| p.0));
            }
        }
        if ws.terms.len() == 1 {
            return psi.log_scale() + ws.terms[0];
        }
        psi.log_scale() + log_sum_exp(&ws.terms)
    }

    fn pick_term<R: Rng + ?Sized>(terms: &[f64], rng: &mut R) -> usize {
        if terms.len() == 1 {
            return 0;
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = terms.iter().map(|v| (v - max).exp()).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (k, v) in terms.iter().enumerate() {
            let w = (v - max).exp();
            if w > 0.0 {
                last = k;
            }
            acc += w;
            if u < acc {
                return k;
            }
        }
        last
    }

    fn sample_from_terms<R: Rng + ?Sized>(&self, t: usize, ws: &mut TwistWorkspace, rng: &mut R, out: &mut [f64]) {
        let k = Self::pick_term(&ws.terms, rng);
        match (&self.steps[t - 1], self.model.transition()) {
            (TwistedStep::Linear { plans }, TransitionKernel::Linear(lin)) => {
                let psi = self.psi.get(t);
                let offset = usize::from(psi.constant() > 0.0);
                if k < offset {
                    lin.cov.sample_into(&ws.mean, rng, out);
                } else {
                    let j = k - offset;
                    let plan = &plans[j];
                    plan.mean_into(&ws.mean, psi.components()[j].mean.as_slice(), &mut ws.product_mean);
                    plan.posterior().sample_into(&ws.product_mean, rng, out);
                }
            }
            _ => {
                let c = &ws.general[k].1;
                c.cov.sample_into(c.mean.as_slice(), rng, out);
            }
        }
    }

    /// Draws `x' ~ f^ψ_t(x, ·)` for `t ≥ 1` and returns `log ψ̃_{t-1}(x)`.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        t: usize,
        x: &[f64],
        ws: &mut TwistWorkspace,
        rng: &mut R,
        out: &mut [f64],
    ) -> f64 {
        let lt = self.kernel_terms(t, x, ws);
        self.sample_from_terms(t, ws, rng, out);
        lt
    }

    /// `log ψ̃_t(x) = log f(x, ψ_{t+1})`, zero at the last step.
    pub fn log_psi_tilde(&self, t: usize, x: &[f64], ws: &mut TwistWorkspace) -> f64 {
        if t + 1 >= self.len() {
            return 0.0;
        }
        if self.psi.get(t + 1).is_constant() {
            let p = self.psi.get(t + 1);
            return p.log_scale() + p.constant().ln();
        }
        self.kernel_terms(t + 1, x, ws)
    }

    /// `log ψ_t(x)`.
    pub fn log_psi(&self, t: usize, x: &[f64], ws: &mut TwistWorkspace) -> f64 {
        self.psi.get(t).eval_log_slice(x, &mut ws.scratch)
    }

    /// `log g^ψ_t(x)`; the `t = 0` potential carries the `ψ̃_0` factor.
    pub fn log_g_twisted(&self, t: usize, x: &[f64], ws: &mut TwistWorkspace) -> f64 {
        let mut v = self.model.log_g(t, x) + self.log_psi_tilde(t, x, ws) - self.log_psi(t, x, ws);
        if t == 0 {
            v += self.log_psi_tilde_0;
        }
        v
    }

    /// `f^ψ_t(x, ·)` as an explicit normalized mixture.
    pub fn transition_mixture(&self, t: usize, x: &[f64]) -> Result<GaussianMixture, TwistError> {
        let base = self.model.transition().components(x);
        Ok(normalized_mixture(twist_mixture(&base, self.psi.get(t))?)?)
    }

    /// `log f^ψ_t(x, x')`.
    pub fn log_transition_density(&self, t: usize, x: &[f64], x_next: &[f64], ws: &mut TwistWorkspace) -> f64 {
        let lt = self.log_psi_tilde(t - 1, x, ws);
        self.model.transition().log_density(x, x_next, &mut ws.scratch) + self.log_psi(t, x_next, ws) - lt
    }
}

/// `log[μ^ψ g^ψ_0 Π f^ψ_t g^ψ_t] − log[μ g_0 Π f g_t]` along `path`.
pub fn integrand_log_ratio(model: &HmmModel, psi: &PsiSequence, path: &[DVector<f64>]) -> Result<f64, TwistError> {
    if path.len() != model.len() {
        return Err(TwistError::DimensionMismatch {
            what: "path length",
            expected: model.len(),
            got: path.len(),
        });
    }
    let tm = TwistedModel::new(model, psi)?;
    let mut ws = TwistWorkspace::new(model.dim_state());
    let mut scratch = Vec::new();
    let x0 = path[0].as_slice();
    let mut twisted = tm.log_initial_density(x0, &mut ws) + tm.log_g_twisted(0, x0, &mut ws);
    let mut base = model.initial().log_density(x0, &mut scratch) + model.log_g(0, x0);
    for t in 1..path.len() {
        let (xp, x) = (path[t - 1].as_slice(), path[t].as_slice());
        twisted += tm.log_transition_density(t, xp, x, &mut ws) + tm.log_g_twisted(t, x, &mut ws);
        base += model.transition().log_density(xp, x, &mut scratch) + model.log_g(t, x);
    }
    Ok(twisted - base)
}

/// Closed-form optimal twisting sequence of a linear-Gaussian model.
#[derive(Clone, Debug)]
pub struct ExactPsiStar {
    pub psi: PsiSequence,
    /// `log ψ̃*_0`, the log marginal likelihood.
    pub log_psi_tilde_0: f64,
}

fn observation_info(model: &HmmModel, t: usize) -> Result<InfoGaussian, TwistError> {
    model.observation_in_state(t).ok_or_else(|| TwistError::Unrepresentable {
        t,
        reason: "observation density is not Gaussian in the state".into(),
    })
}

fn moment_form(info: &InfoGaussian, t: usize) -> Result<GaussianComponent, TwistError> {
    info.to_moment_form().map_err(|_| TwistError::Unrepresentable {
        t,
        reason: "observation matrix lacks full column rank".into(),
    })
}

/// `x ↦ f(x, w·𝒩(·; a, P))` in information form for a linear kernel.
fn linear_apply_gaussian(lin: &LinearTransition, comp: &GaussianComponent) -> Result<InfoGaussian, TwistError> {
    let a_mat = lin.map.to_matrix();
    let s = lin.cov.to_matrix() + comp.cov.to_matrix();
    let chol = s.clone().cholesky().ok_or(MathError::NotPositiveDefinite)?;
    let centred = &comp.mean - &lin.offset;
    let s_inv_a = chol.solve(&a_mat);
    let s_inv_c = chol.solve(&centred);
    let log_det_s = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let d = comp.dim() as f64;
    Ok(InfoGaussian {
        precision: a_mat.transpose() * s_inv_a,
        shift: a_mat.transpose() * &s_inv_c,
        log_const: comp.log_weight - 0.5 * centred.dot(&s_inv_c) - 0.5 * (d * LN_2PI + log_det_s),
    })
}

/// `ψ*_{T-1} = g(·, y_{T-1})`, `ψ*_t = g(·, y_t)·f(·, ψ*_{t+1})`, each stored as
/// one Gaussian component with `C = 0`. With `track_scale` the absolute
/// scale goes into each function's log-scale; otherwise every `ψ*_t` is a
/// normalized density. `log ψ̃*_0` is always exact.
pub fn exact_psi_star_lgssm(model: &HmmModel, track_scale: bool) -> Result<ExactPsiStar, TwistError> {
    if model.linear_gaussian().is_none() {
        return Err(TwistError::NotLinearGaussian);
    }
    let TransitionKernel::Linear(lin) = model.transition() else {
        return Err(TwistError::NotLinearGaussian);
    };
    let len = model.len();
    let d = model.dim_state();
    let mut comps: Vec<GaussianComponent> = Vec::with_capacity(len);
    let mut next: Option<GaussianComponent> = None;
    for t in (0..len).rev() {
        let mut info = observation_info(model, t)?;
        if let Some(n) = &next {
            info = info.multiply(&linear_apply_gaussian(lin, n)?);
        }
        let comp = moment_form(&info, t)?;
        next = Some(comp.clone());
        comps.push(comp);
    }
    comps.reverse();
    let first = &comps[0];
    let mut log_psi_tilde_0 = f64::NEG_INFINITY;
    let mut terms = Vec::new();
    let mut scratch = Vec::new();
    for m in model.initial().components() {
        let sum = m.cov.add(&first.cov)?;
        terms.push(m.log_weight + first.log_weight + sum.log_density(m.mean.as_slice(), first.mean.as_slice(), &mut scratch));
    }
    if !terms.is_empty() {
        log_psi_tilde_0 = log_sum_exp(&terms);
    }
    let psis = comps
        .into_iter()
        .map(|mut c| {
            let scale = if track_scale { c.log_weight } else { 0.0 };
            c.log_weight = 0.0;
            Ok(PsiFunction::new(d, 0.0, vec![c])?.with_log_scale(scale))
        })
        .collect::<Result<Vec<_>, TwistError>>()?;
    Ok(ExactPsiStar {
        psi: PsiSequence::new(psis)?,
        log_psi_tilde_0,
    })
}

/// `ψ_t ∝ g(·, y_t)`, available when each observation density is a Gaussian
/// function of the state.
pub fn fully_adapted_psi(model: &HmmModel) -> Result<PsiSequence, TwistError> {
    let d = model.dim_state();
    let psis = (0..model.len())
        .map(|t| {
            let mut c = moment_form(&observation_info(model, t)?, t)?;
            let scale = c.log_weight;
            c.log_weight = 0.0;
            Ok(PsiFunction::new(d, 0.0, vec![c])?.with_log_scale(scale))
        })
        .collect::<Result<Vec<_>, TwistError>>()?;
    PsiSequence::new(psis)
}
