//! Marginal posterior of the GP hyperparameters and the conjugate
//! conditionals of `beta` and `tau^2`.
//!
//! Hyperparameters live in log coordinates. `V` is the negative log of the
//! unnormalized marginal posterior density *with respect to those log
//! coordinates*, i.e. it already contains the Jacobian `sum log(theta)`.
//! Every point-independent term is dropped.
//!
//! With `A = K_n + eta I` (plus jitter), `M = G' A^-1 G` and `r = y - G beta_hat`:
//!
//! * informative `beta ~ N(0, nu^2 R)`, point `(log w, log eta, log tau2)`:
//!   `V = 1/2 log|Q| + 1/2 (r'A^-1 r / tau2 + beta_hat' Lambda beta_hat)
//!        + (n + df)/2 log tau2 + 1/(2 tau2) + 1/2 log|A| + gamma terms`,
//!   `Q = M / tau2 + Lambda`, `Lambda = (nu^2 R)^-1`.
//! * flat `beta`, point `(log w, log eta)`:
//!   `V = (df + n - p)/2 log tau2_hat + 1/2 log|M| + 1/2 log|A| + gamma terms`,
//!   `tau2_hat = (1 + r'A^-1 r) / (df + n - p)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{hierarchy_r, BasisSpec, HierarchyR};
use crate::data::Dataset;
use crate::error::{invalid, GpError, Result};
use crate::kernels::{kernel_matrix, KernelParams};

pub const DEFAULT_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-6;

/// `Gamma(shape, rate)` prior on a positive parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Self {
        Self { shape, rate }
    }

    /// `Gamma(shape, scale)`, stored as rate `1 / scale`.
    pub fn from_scale(shape: f64, scale: f64) -> Self {
        Self { shape, rate: 1.0 / scale }
    }

    /// `-log p(theta) - log theta` up to a constant.
    pub fn neg_log_density_log_space(&self, theta: f64) -> f64 {
        self.rate * theta - self.shape * theta.ln()
    }

    /// Derivative of `log p(theta) + log theta` with respect to `log theta`.
    pub fn log_density_log_space_grad(&self, theta: f64) -> f64 {
        self.shape - self.rate * theta
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !(self.shape > 0.0 && self.rate > 0.0) {
            return invalid(format!("{what} prior needs shape > 0 and rate > 0, got {self:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BetaPrior {
    Informative { nu2: f64, hierarchy: HierarchyR },
    NonInformative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    /// One prior per input dimension.
    pub omega: Vec<GammaPrior>,
    pub eta: GammaPrior,
    pub df_tau2: f64,
    pub beta: BetaPrior,
    pub jitter: f64,
}

impl PriorConfig {
    pub fn non_informative(omega: Vec<GammaPrior>, eta: GammaPrior, df_tau2: f64) -> Self {
        Self { omega, eta, df_tau2, beta: BetaPrior::NonInformative, jitter: DEFAULT_JITTER }
    }

    pub fn informative(
        omega: Vec<GammaPrior>,
        eta: GammaPrior,
        df_tau2: f64,
        nu: f64,
        basis: &BasisSpec,
        r: f64,
    ) -> Result<Self> {
        Ok(Self {
            omega,
            eta,
            df_tau2,
            beta: BetaPrior::Informative { nu2: nu * nu, hierarchy: hierarchy_r(basis, r)? },
            jitter: DEFAULT_JITTER,
        })
    }

    pub fn is_informative(&self) -> bool {
        matches!(self.beta, BetaPrior::Informative { .. })
    }

    /// Number of log coordinates of a [`HyperPoint`] under this regime.
    pub fn point_dim(&self) -> usize {
        self.omega.len() + if self.is_informative() { 2 } else { 1 }
    }

    /// Same prior with the hierarchy matrix rebuilt for `basis` (after a mask change).
    pub fn for_basis(&self, basis: &BasisSpec) -> Result<Self> {
        let mut out = self.clone();
        if let BetaPrior::Informative { nu2, hierarchy } = &self.beta {
            out.beta = BetaPrior::Informative { nu2: *nu2, hierarchy: hierarchy_r(basis, hierarchy.r)? };
        }
        Ok(out)
    }

    /// Same prior with a new shrinkage scale `nu`.
    pub fn with_nu(&self, nu: f64) -> Self {
        let mut out = self.clone();
        if let BetaPrior::Informative { hierarchy, .. } = &self.beta {
            out.beta = BetaPrior::Informative { nu2: nu * nu, hierarchy: hierarchy.clone() };
        }
        out
    }

    pub fn validate(&self, d: usize, p: usize) -> Result<()> {
        if self.omega.len() != d {
            return invalid(format!("{} omega priors for input dimension {d}", self.omega.len()));
        }
        for (j, g) in self.omega.iter().enumerate() {
            g.validate(&format!("omega_{}", j + 1))?;
        }
        self.eta.validate("eta")?;
        if !(self.df_tau2 >= 0.0) {
            return invalid(format!("df_tau2 must be >= 0, got {}", self.df_tau2));
        }
        if !(self.jitter >= 0.0) {
            return invalid("jitter must be >= 0");
        }
        if let BetaPrior::Informative { nu2, hierarchy } = &self.beta {
            if !(*nu2 > 0.0) {
                return invalid(format!("nu^2 must be > 0, got {nu2}"));
            }
            if hierarchy.diag.len() != p {
                return invalid(format!(
                    "hierarchy matrix has {} entries but G has {p} columns",
                    hierarchy.diag.len()
                ));
            }
        }
        Ok(())
    }
}

/// Point `(log w, log eta[, log tau2])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPoint {
    pub log_omega: Vec<f64>,
    pub log_eta: f64,
    pub log_tau2: Option<f64>,
}

impl HyperPoint {
    pub fn from_natural(omega: &[f64], eta: f64, tau2: Option<f64>) -> Self {
        Self {
            log_omega: omega.iter().map(|w| w.ln()).collect(),
            log_eta: eta.ln(),
            log_tau2: tau2.map(f64::ln),
        }
    }

    pub fn from_coords(coords: &[f64], d: usize, informative: bool) -> Result<Self> {
        let want = d + if informative { 2 } else { 1 };
        if coords.len() != want {
            return invalid(format!("expected {want} coordinates, got {}", coords.len()));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GpError::Numerical(format!("non-finite coordinates {coords:?}")));
        }
        Ok(Self {
            log_omega: coords[..d].to_vec(),
            log_eta: coords[d],
            log_tau2: informative.then(|| coords[d + 1]),
        })
    }

    pub fn coords(&self) -> Vec<f64> {
        let mut v = self.log_omega.clone();
        v.push(self.log_eta);
        v.extend(self.log_tau2);
        v
    }

    pub fn omega(&self) -> Vec<f64> {
        self.log_omega.iter().map(|v| v.exp()).collect()
    }

    pub fn eta(&self) -> f64 {
        self.log_eta.exp()
    }

    pub fn tau2(&self) -> Option<f64> {
        self.log_tau2.map(f64::exp)
    }
}

/// Cholesky factor of `K_n + (eta + jitter) I` together with `K_n`.
#[derive(Debug, Clone)]
pub struct CovFactor {
    chol: Cholesky<f64, Dyn>,
    kernel: DMatrix<f64>,
    pub jitter: f64,
}

impl CovFactor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factorizes `K_n + eta I + jitter I`, escalating the jitter tenfold up to
/// `1e-6` when the factorization fails.
pub fn cov_factor(x: &DMatrix<f64>, params: &KernelParams, eta: f64, jitter: f64) -> Result<CovFactor> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return invalid(format!("eta must be finite and >= 0, got {eta}"));
    }
    let kernel = kernel_matrix(x, params)?;
    let mut jit = jitter;
    loop {
        let mut a = kernel.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += eta + jit;
        }
        if let Some(chol) = Cholesky::new(a) {
            return Ok(CovFactor { chol, kernel, jitter: jit });
        }
        if jit >= MAX_JITTER {
            return Err(GpError::Numerical(format!(
                "K_n + eta I is not positive definite (n={}, eta={eta:e}, jitter={jit:e}, omega={:?})",
                x.nrows(),
                params.omega()
            )));
        }
        jit = if jit <= 0.0 { DEFAULT_JITTER } else { (jit * 10.0).min(MAX_JITTER) };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaConditional {
    pub beta_hat: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub informative: bool,
    /// `tau^2` the covariance was formed with.
    pub tau2: f64,
}

impl BetaConditional {
    /// Flat-prior conditional rescaled to another `tau^2`; the informative
    /// conditional is returned unchanged.
    pub fn with_tau2(&self, tau2: f64) -> Self {
        if self.informative {
            return self.clone();
        }
        let mut out = self.clone();
        out.sigma_beta *= tau2 / self.tau2;
        out.tau2 = tau2;
        out
    }
}

/// `tau^2 | w, eta, y ~ Scaled-Inv-chi^2(df, scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tau2Conditional {
    pub df: f64,
    pub scale: f64,
}

/// Everything the conjugate formulas need at one hyperparameter point.
#[derive(Debug, Clone)]
pub struct Conditional {
    pub point: HyperPoint,
    pub factor: CovFactor,
    /// `A^-1 G`.
    pub ainv_g: DMatrix<f64>,
    /// `G' A^-1 G`.
    pub gls: DMatrix<f64>,
    /// `A^-1 (y - G beta_hat)`.
    pub alpha: DVector<f64>,
    /// `(y - G beta_hat)' A^-1 (y - G beta_hat)`.
    pub resid_quad: f64,
    pub beta: BetaConditional,
    pub tau2_cond: Option<Tau2Conditional>,
    /// `tau^2` used for prediction: the point's value, or `tau2_hat` under the flat prior.
    pub tau2: f64,
    /// Cholesky factor of `Sigma_beta^-1 = M / tau2 + Lambda` (informative only).
    precision: Option<Cholesky<f64, Dyn>>,
    gls_chol: Option<Cholesky<f64, Dyn>>,
}

impl Conditional {
    /// `[G' A^-1 G]^-1`, needed by the predictive variance.
    pub fn gls_inverse(&self) -> Result<DMatrix<f64>> {
        match &self.gls_chol {
            Some(c) => Ok(c.inverse()),
            None => Err(GpError::Numerical("G' A^-1 G is singular".into())),
        }
    }

    pub fn gls_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.gls_chol {
            Some(c) => Ok(c.solve(b)),
            None => Err(GpError::Numerical("G' A^-1 G is singular".into())),
        }
    }
}

/// Borrowed view of the model: data, basis matrix and prior.
#[derive(Debug, Clone, Copy)]
pub struct Posterior<'a> {
    pub data: &'a Dataset,
    pub g: &'a DMatrix<f64>,
    pub prior: &'a PriorConfig,
}

impl<'a> Posterior<'a> {
    pub fn new(data: &'a Dataset, g: &'a DMatrix<f64>, prior: &'a PriorConfig) -> Result<Self> {
        if g.nrows() != data.n() {
            return invalid(format!("G has {} rows but the data has {}", g.nrows(), data.n()));
        }
        prior.validate(data.d(), g.ncols())?;
        if !prior.is_informative() && data.n() <= g.ncols() {
            return invalid(format!(
                "flat beta prior needs n > p (n={}, p={})",
                data.n(),
                g.ncols()
            ));
        }
        Ok(Self { data, g, prior })
    }

    pub fn dim(&self) -> usize {
        self.prior.point_dim()
    }

    pub fn point(&self, coords: &[f64]) -> Result<HyperPoint> {
        HyperPoint::from_coords(coords, self.data.d(), self.prior.is_informative())
    }

    fn check_point(&self, point: &HyperPoint) -> Result<()> {
        if point.log_omega.len() != self.data.d() {
            return invalid(format!(
                "point has {} lengthscales for d={}",
                point.log_omega.len(),
                self.data.d()
            ));
        }
        if point.log_tau2.is_some() != self.prior.is_informative() {
            return invalid("point carries log tau2 exactly when the beta prior is informative");
        }
        Ok(())
    }

    /// Conditional quantities at `point`.
    pub fn condition(&self, point: &HyperPoint) -> Result<Conditional> {
        self.check_point(point)?;
        let n = self.data.n();
        let p = self.g.ncols();
        let params = KernelParams::new(point.omega())?;
        let factor = cov_factor(&self.data.x, &params, point.eta(), self.prior.jitter)?;
        let ainv_y = factor.solve(&self.data.y);
        let ainv_g = factor.solve_mat(self.g);
        let mut gls = self.g.transpose() * &ainv_g;
        gls = (&gls + gls.transpose()) * 0.5;
        let gty = self.g.transpose() * &ainv_y;
        let gls_chol = Cholesky::new(gls.clone());

        match &self.prior.beta {
            BetaPrior::NonInformative => {
                let chol = gls_chol.as_ref().ok_or_else(|| {
                    GpError::Numerical("G' (K_n + eta I)^-1 G is rank deficient".into())
                })?;
                let beta_hat = chol.solve(&gty);
                let alpha = &ainv_y - &ainv_g * &beta_hat;
                let resid = &self.data.y - self.g * &beta_hat;
                let resid_quad = resid.dot(&alpha).max(0.0);
                let df = self.prior.df_tau2 + (n - p) as f64;
                let scale = (1.0 + resid_quad) / df;
                let sigma_beta = chol.inverse() * scale;
                Ok(Conditional {
                    point: point.clone(),
                    factor,
                    ainv_g,
                    gls,
                    alpha,
                    resid_quad,
                    beta: BetaConditional { beta_hat, sigma_beta, informative: false, tau2: scale },
                    tau2_cond: Some(Tau2Conditional { df, scale }),
                    tau2: scale,
                    precision: None,
                    gls_chol,
                })
            }
            BetaPrior::Informative { nu2, hierarchy } => {
                let tau2 = point.tau2().expect("checked by check_point");
                let mut q = &gls / tau2;
                for (t, r) in hierarchy.diag.iter().enumerate() {
                    q[(t, t)] += 1.0 / (nu2 * r);
                }
                let precision = Cholesky::new(q).ok_or_else(|| {
                    GpError::Numerical("posterior precision of beta is not positive definite".into())
                })?;
                let beta_hat = precision.solve(&(gty / tau2));
                let alpha = &ainv_y - &ainv_g * &beta_hat;
                let resid = &self.data.y - self.g * &beta_hat;
                let resid_quad = resid.dot(&alpha).max(0.0);
                let sigma_beta = precision.inverse();
                let _ = p;
                Ok(Conditional {
                    point: point.clone(),
                    factor,
                    ainv_g,
                    gls,
                    alpha,
                    resid_quad,
                    beta: BetaConditional { beta_hat, sigma_beta, informative: true, tau2 },
                    tau2_cond: None,
                    tau2,
                    precision: Some(precision),
                    gls_chol,
                })
            }
        }
    }

    fn prior_terms(&self, point: &HyperPoint) -> f64 {
        let omega: f64 = self
            .prior
            .omega
            .iter()
            .zip(point.omega())
            .map(|(g, w)| g.neg_log_density_log_space(w))
            .sum();
        omega + self.prior.eta.neg_log_density_log_space(point.eta())
    }

    fn value_from(&self, cond: &Conditional) -> f64 {
        let n = self.data.n() as f64;
        let half_logdet_a = 0.5 * cond.factor.log_det();
        let prior = self.prior_terms(&cond.point);
        match &self.prior.beta {
            BetaPrior::NonInformative => {
                let tc = cond.tau2_cond.expect("flat regime carries tau2 conditional");
                let gls_logdet = chol_log_det(cond.gls_chol.as_ref().unwrap());
                0.5 * tc.df * tc.scale.ln() + 0.5 * gls_logdet + half_logdet_a + prior
            }
            BetaPrior::Informative { nu2, hierarchy } => {
                let s = cond.tau2;
                let precision = cond.precision.as_ref().unwrap();
                let shrink: f64 = cond
                    .beta
                    .beta_hat
                    .iter()
                    .zip(&hierarchy.diag)
                    .map(|(b, r)| b * b / (nu2 * r))
                    .sum();
                0.5 * chol_log_det(precision)
                    + 0.5 * (cond.resid_quad / s + shrink)
                    + 0.5 * (n + self.prior.df_tau2) * s.ln()
                    + 0.5 / s
                    + half_logdet_a
                    + prior
            }
        }
    }

    /// `V` at a point given by log coordinates.
    pub fn value(&self, coords: &[f64]) -> Result<f64> {
        let point = self.point(coords)?;
        let cond = self.condition(&point)?;
        finite(self.value_from(&cond), coords)
    }

    /// `V` and its gradient with respect to the log coordinates.
    pub fn value_grad(&self, coords: &[f64]) -> Result<(f64, Vec<f64>)> {
        let point = self.point(coords)?;
        let cond = self.condition(&point)?;
        let v = finite(self.value_from(&cond), coords)?;
        let grad = self.gradient_from(&cond);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GpError::Numerical(format!("non-finite gradient at {coords:?}")));
        }
        Ok((v, grad))
    }

    fn gradient_from(&self, cond: &Conditional) -> Vec<f64> {
        let n = self.data.n();
        let d = self.data.d();
        let point = &cond.point;
        let ainv = cond.factor.inverse();

        // dV/dtheta = sum_ik W_ik dA_ik/dtheta for every theta entering A.
        let mut w = ainv * 0.5;
        let (low_rank, resid_weight) = match &self.prior.beta {
            BetaPrior::NonInformative => {
                let tc = cond.tau2_cond.unwrap();
                let gls_inv = cond.gls_chol.as_ref().unwrap().inverse();
                (&cond.ainv_g * gls_inv, tc.df / (1.0 + cond.resid_quad))
            }
            BetaPrior::Informative { .. } => {
                let s = cond.tau2;
                (&cond.ainv_g * &cond.beta.sigma_beta / s, 1.0 / s)
            }
        };
        w.gemm(-0.5, &low_rank, &cond.ainv_g.transpose(), 1.0);
        w.ger(-0.5 * resid_weight, &cond.alpha, &cond.alpha, 1.0);

        let kernel = cond.factor.kernel();
        let omega = point.omega();
        let mut grad = Vec::with_capacity(self.dim());
        for j in 0..d {
            let col = self.data.x.column(j);
            let mut acc = 0.0;
            for b in 0..n {
                let xb = col[b];
                for a in (b + 1)..n {
                    let diff = col[a] - xb;
                    acc += (w[(a, b)] + w[(b, a)]) * kernel[(a, b)] * diff * diff;
                }
            }
            grad.push(-acc * omega[j] - self.prior.omega[j].log_density_log_space_grad(omega[j]));
        }
        let eta = point.eta();
        grad.push(w.trace() * eta - self.prior.eta.log_density_log_space_grad(eta));

        if let BetaPrior::Informative { .. } = &self.prior.beta {
            let s = cond.tau2;
            let tr = (&cond.beta.sigma_beta * &cond.gls).trace();
            let nn = n as f64 + self.prior.df_tau2;
            grad.push(-0.5 * tr / s - 0.5 * cond.resid_quad / s + 0.5 * nn - 0.5 / s);
        }
        grad
    }
}

fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

fn finite(v: f64, coords: &[f64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GpError::Numerical(format!("non-finite posterior value at {coords:?}")))
    }
}

pub fn beta_conditional(
    data: &Dataset,
    g: &DMatrix<f64>,
    prior: &PriorConfig,
    point: &HyperPoint,
) -> Result<BetaConditional> {
    Ok(Posterior::new(data, g, prior)?.condition(point)?.beta)
}

/// Conditional of `tau^2` under the flat `beta` prior.
pub fn tau2_conditional(
    data: &Dataset,
    g: &DMatrix<f64>,
    prior: &PriorConfig,
    point: &HyperPoint,
) -> Result<Tau2Conditional> {
    if prior.is_informative() {
        return invalid("tau2 conditional is only defined under the flat beta prior");
    }
    Posterior::new(data, g, prior)?
        .condition(point)?
        .tau2_cond
        .ok_or_else(|| GpError::InvalidState("missing tau2 conditional".into()))
}

pub fn log_posterior(
    data: &Dataset,
    g: &DMatrix<f64>,
    prior: &PriorConfig,
    point: &HyperPoint,
) -> Result<f64> {
    Posterior::new(data, g, prior)?.value(&point.coords())
}

pub fn grad_log_posterior(
    data: &Dataset,
    g: &DMatrix<f64>,
    prior: &PriorConfig,
    point: &HyperPoint,
) -> Result<Vec<f64>> {
    Posterior::new(data, g, prior)?.value_grad(&point.coords()).map(|(_, g)| g)
}

/// Draw from `N(beta_hat, Sigma_beta)`.
pub fn sample_beta<R: Rng + ?Sized>(cond: &BetaConditional, rng: &mut R) -> Result<DVector<f64>> {
    let sym = (&cond.sigma_beta + cond.sigma_beta.transpose()) * 0.5;
    let chol = Cholesky::new(sym)
        .ok_or_else(|| GpError::Numerical("Sigma_beta is not positive definite".into()))?;
    let z = DVector::from_iterator(
        cond.beta_hat.len(),
        (0..cond.beta_hat.len()).map(|_| rng.sample::<f64, _>(StandardNormal)),
    );
    Ok(&cond.beta_hat + chol.l() * z)
}

/// Draw `df * scale / chi^2(df)`.
pub fn sample_tau2<R: Rng + ?Sized>(cond: &Tau2Conditional, rng: &mut R) -> f64 {
    let chi = ChiSquared::new(cond.df).expect("df > 0 by construction");
    let mut draw: f64 = chi.sample(rng);
    while draw <= 0.0 {
        draw = chi.sample(rng);
    }
    cond.df * cond.scale / draw
}
