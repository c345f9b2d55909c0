//! Fitting drivers, posterior prediction, particle aggregation, credible
//! intervals for `beta`, term selection and cross-validation of `nu`.

use std::io::Write;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{design_matrix, BasisSpec};
use crate::benchmarks::standardized_rmspe;
use crate::data::Dataset;
use crate::error::{invalid, GpError, Result};
use crate::evi::{
    evi_im, evi_map, init_particles, EviConfig, NaturalScale, ParticleEnsemble, ParticleScale, RunOptions,
};
use crate::kernels::KernelParams;
use crate::posterior::{sample_beta, Conditional, HyperPoint, Posterior, PriorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMode {
    Map,
    Post,
}

impl std::str::FromStr for FitMode {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Self::Map),
            "post" => Ok(Self::Post),
            other => invalid(format!("unknown EVI mode '{other}' (expected map or post)")),
        }
    }
}

/// Natural-scale box for initial hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    /// One range per `omega_j`, or a single range shared by all.
    pub omega: Vec<(f64, f64)>,
    pub eta: (f64, f64),
    /// Only used under the informative prior; `None` means "around var(y)".
    pub tau2: Option<(f64, f64)>,
}

impl InitBox {
    pub fn uniform(omega: (f64, f64), eta: (f64, f64)) -> Self {
        Self { omega: vec![omega], eta, tau2: None }
    }

    /// Per-coordinate bounds in [`HyperPoint`] order.
    pub fn bounds(&self, d: usize, informative: bool, y: &DVector<f64>) -> Result<Vec<(f64, f64)>> {
        let mut out = match self.omega.len() {
            1 => vec![self.omega[0]; d],
            k if k == d => self.omega.clone(),
            k => return invalid(format!("{k} omega init ranges for dimension {d}")),
        };
        out.push(self.eta);
        if informative {
            out.push(match self.tau2 {
                Some(r) => r,
                None => {
                    let v = sample_variance(y.as_slice()).max(1e-8);
                    (0.5 * v, 1.5 * v)
                }
            });
        }
        Ok(out)
    }
}

fn sample_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 1.0;
    }
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
}

/// Midpoint of each natural-scale range, as log coordinates.
pub fn box_center(bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds
        .iter()
        .map(|&(lo, hi)| {
            let lo = if lo == 0.0 { 1e-4 } else { lo };
            (0.5 * (lo + hi)).ln()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub mode_kind: FitMode,
    pub prior: PriorConfig,
    pub basis: BasisSpec,
    pub data: Dataset,
    pub mode: Option<HyperPoint>,
    pub ensemble: Option<ParticleEnsemble>,
    /// `V` (MAP) or `F_h` (particles) per epoch.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub warning: Option<String>,
}

impl FitResult {
    pub fn validate(&self) -> Result<()> {
        if self.mode.is_none() && self.ensemble.is_none() {
            return Err(GpError::InvalidState("fit has neither a mode nor particles".into()));
        }
        Ok(())
    }

    /// Hyperparameter points the predictive mixes over.
    pub fn points(&self) -> Result<Vec<HyperPoint>> {
        self.validate()?;
        let informative = self.prior.is_informative();
        match (&self.ensemble, &self.mode) {
            (Some(ens), _) => (0..ens.n())
                .map(|i| HyperPoint::from_coords(&ens.particle(i), self.data.d(), informative))
                .collect(),
            (None, Some(m)) => Ok(vec![m.clone()]),
            (None, None) => unreachable!(),
        }
    }

    pub fn design_matrix(&self) -> Result<DMatrix<f64>> {
        design_matrix(&self.basis, &self.data.x)
    }

    /// Conditional quantities at every point of the fit.
    pub fn conditionals(&self) -> Result<Vec<Conditional>> {
        let g = self.design_matrix()?;
        let post = Posterior::new(&self.data, &g, &self.prior)?;
        self.points()?.par_iter().map(|p| post.condition(p)).collect()
    }
}

pub struct FitSettings<'a> {
    pub config: &'a EviConfig,
    pub step_size: f64,
    pub init: &'a InitBox,
    pub scale: ParticleScale,
}

/// Proximal-point MAP fit, started from `x0` (log coordinates) or the box centre.
pub fn fit_map(
    data: &Dataset,
    basis: &BasisSpec,
    prior: &PriorConfig,
    settings: &FitSettings,
    x0: Option<&[f64]>,
) -> Result<FitResult> {
    let g = design_matrix(basis, &data.x)?;
    let post = Posterior::new(data, &g, prior)?;
    let start = match x0 {
        Some(x) => x.to_vec(),
        None => box_center(&settings.init.bounds(data.d(), prior.is_informative(), &data.y)?),
    };
    let run = RunOptions::default();
    let res = match settings.scale {
        ParticleScale::Log => evi_map(&start, &post, settings.step_size, settings.config, run)?,
        ParticleScale::Natural => {
            let nat = NaturalScale(&post);
            let mut res = evi_map(&ParticleScale::Natural.from_log(&start), &nat, settings.step_size, settings.config, run)?;
            res.mode = ParticleScale::Natural.to_log(&res.mode);
            res
        }
    };
    let mode = HyperPoint::from_coords(&res.mode, data.d(), prior.is_informative())?;
    Ok(FitResult {
        mode_kind: FitMode::Map,
        prior: prior.clone(),
        basis: basis.clone(),
        data: data.clone(),
        mode: Some(mode),
        ensemble: None,
        trace: res.trace,
        converged: res.converged,
        warning: res.warning,
    })
}

/// `N`-particle implicit-Euler fit with particles drawn from the init box.
pub fn fit_post<R: Rng + ?Sized>(
    data: &Dataset,
    basis: &BasisSpec,
    prior: &PriorConfig,
    settings: &FitSettings,
    n_particles: usize,
    h: f64,
    rng: &mut R,
) -> Result<FitResult> {
    let g = design_matrix(basis, &data.x)?;
    let post = Posterior::new(data, &g, prior)?;
    let bounds = settings.init.bounds(data.d(), prior.is_informative(), &data.y)?;
    let mut init = ParticleEnsemble::new(init_particles(n_particles, &bounds, rng)?, h, settings.step_size)?;
    let run = RunOptions::default();
    let res = match settings.scale {
        ParticleScale::Log => evi_im(&init, &post, settings.config, run)?,
        ParticleScale::Natural => {
            init.particles.apply(|v| *v = v.exp());
            let mut res = evi_im(&init, &NaturalScale(&post), settings.config, run)?;
            res.ensemble.particles.apply(|v| *v = v.ln());
            res
        }
    };
    Ok(FitResult {
        mode_kind: FitMode::Post,
        prior: prior.clone(),
        basis: basis.clone(),
        data: data.clone(),
        mode: None,
        ensemble: Some(res.ensemble),
        trace: res.trace,
        converged: res.converged,
        warning: res.warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

const Z95: f64 = 1.96;

fn clamp_variance(v: f64, scale: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -1e-8 * scale.max(1.0) {
        Ok(0.0)
    } else {
        Err(GpError::Numerical(format!("negative predictive variance {v}")))
    }
}

/// Means and variances at the rows of `xq` for one conditional.
fn predict_conditional(
    cond: &Conditional,
    basis: &BasisSpec,
    x_train: &DMatrix<f64>,
    xq: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let omega = cond.point.omega();
    let params = KernelParams::new(omega.clone())?;
    let m = xq.nrows();
    let n = x_train.nrows();
    if xq.ncols() != x_train.ncols() {
        return invalid(format!("queries have dimension {} but the fit has {}", xq.ncols(), x_train.ncols()));
    }
    // n x m cross-correlations
    let mut kq = DMatrix::zeros(n, m);
    for q in 0..m {
        let row: Vec<f64> = xq.row(q).iter().copied().collect();
        kq.set_column(q, &crate::kernels::cross_kernel(&row, x_train, &params)?);
    }
    let gq = design_matrix(basis, xq)?;
    let means = &gq * &cond.beta.beta_hat + kq.transpose() * &cond.alpha;
    let l = cond.factor.l();
    let v = l.solve_lower_triangular(&kq).ok_or_else(|| GpError::Numerical("triangular solve failed".into()))?;
    // c = g - G' A^-1 k, one column per query
    let c = gq.transpose() - cond.ainv_g.transpose() * &kq;
    let minv_c = {
        let mut out = DMatrix::zeros(c.nrows(), m);
        for q in 0..m {
            out.set_column(q, &cond.gls_solve(&c.column(q).into_owned())?);
        }
        out
    };
    let tau2 = cond.tau2;
    let mut vars = Vec::with_capacity(m);
    for q in 0..m {
        let reduction = v.column(q).norm_squared();
        let trend = c.column(q).dot(&minv_c.column(q));
        vars.push(clamp_variance(tau2 * (1.0 - reduction + trend), tau2)?);
    }
    Ok((means.iter().copied().collect(), vars))
}

/// Predictive mean and variance at one query for one hyperparameter point.
pub fn predict_at(fit: &FitResult, point: &HyperPoint, x: &[f64]) -> Result<(f64, f64)> {
    let g = fit.design_matrix()?;
    let cond = Posterior::new(&fit.data, &g, &fit.prior)?.condition(point)?;
    let xq = DMatrix::from_row_slice(1, x.len(), x);
    let (m, v) = predict_conditional(&cond, &fit.basis, &fit.data.x, &xq)?;
    Ok((m[0], v[0]))
}

/// Mixture prediction over the fit's points (law of total variance).
pub fn predict_aggregate(fit: &FitResult, xq: &DMatrix<f64>) -> Result<Vec<Prediction>> {
    let conds = fit.conditionals()?;
    if conds.is_empty() {
        return Err(GpError::InvalidState("empty particle ensemble".into()));
    }
    let per: Vec<(Vec<f64>, Vec<f64>)> = conds
        .par_iter()
        .map(|c| predict_conditional(c, &fit.basis, &fit.data.x, xq))
        .collect::<Result<_>>()?;
    let k = per.len() as f64;
    Ok((0..xq.nrows())
        .map(|q| {
            let mean = per.iter().map(|(m, _)| m[q]).sum::<f64>() / k;
            let within = per.iter().map(|(_, v)| v[q]).sum::<f64>() / k;
            let between = per.iter().map(|(m, _)| (m[q] - mean) * (m[q] - mean)).sum::<f64>() / k;
            let variance = within + between;
            let half = Z95 * variance.sqrt();
            Prediction { mean, variance, lower: mean - half, upper: mean + half }
        })
        .collect())
}

/// CSV with header `mean,variance,lower95,upper95`.
pub fn write_predictions<W: Write>(w: W, preds: &[Prediction]) -> Result<()> {
    let m = DMatrix::from_fn(preds.len(), 4, |i, j| match j {
        0 => preds[i].mean,
        1 => preds[i].variance,
        2 => preds[i].lower,
        _ => preds[i].upper,
    });
    let header = ["mean", "variance", "lower95", "upper95"].map(String::from);
    crate::csvio::write_matrix(w, &header, &m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaInterval {
    pub label: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Interval excludes zero.
    pub flagged: bool,
}

/// Repetitions of one-draw-per-particle sampling for particle intervals.
pub const POST_INTERVAL_REPS: usize = 100;

fn quantile(sorted: &[f64], prob: f64) -> f64 {
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central credible intervals for the active `beta` terms.
pub fn beta_intervals(fit: &FitResult, level: f64, seed: u64) -> Result<Vec<BetaInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return invalid(format!("interval level must be in (0, 1), got {level}"));
    }
    let labels = fit.basis.active_labels();
    let conds = fit.conditionals()?;
    let make = |j: usize, estimate: f64, lower: f64, upper: f64| BetaInterval {
        label: labels[j].clone(),
        estimate,
        lower,
        upper,
        flagged: lower > 0.0 || upper < 0.0,
    };
    if fit.ensemble.is_none() {
        let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0);
        let b = &conds[0].beta;
        return Ok((0..labels.len())
            .map(|j| {
                let half = z * b.sigma_beta[(j, j)].max(0.0).sqrt();
                make(j, b.beta_hat[j], b.beta_hat[j] - half, b.beta_hat[j] + half)
            })
            .collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = labels.len();
    let mut draws: Vec<Vec<f64>> = vec![Vec::with_capacity(conds.len() * POST_INTERVAL_REPS); p];
    for _ in 0..POST_INTERVAL_REPS {
        for c in &conds {
            let b = sample_beta(&c.beta, &mut rng)?;
            for j in 0..p {
                draws[j].push(b[j]);
            }
        }
    }
    let alpha = 1.0 - level;
    Ok((0..p)
        .map(|j| {
            let estimate = conds.iter().map(|c| c.beta.beta_hat[j]).sum::<f64>() / conds.len() as f64;
            let col = &mut draws[j];
            col.sort_by(f64::total_cmp);
            make(j, estimate, quantile(col, alpha / 2.0), quantile(col, 1.0 - alpha / 2.0))
        })
        .collect())
}

/// CSV with header `term,estimate,lower,upper,flagged`.
pub fn write_intervals<W: Write>(mut w: W, intervals: &[BetaInterval]) -> Result<()> {
    use crate::csvio::fmt_g17;
    writeln!(w, "term,estimate,lower,upper,flagged")?;
    for iv in intervals {
        writeln!(
            w,
            "{},{},{},{},{}",
            iv.label,
            fmt_g17(iv.estimate),
            fmt_g17(iv.lower),
            fmt_g17(iv.upper),
            u8::from(iv.flagged)
        )?;
    }
    Ok(())
}

/// Keeps the flagged active terms (and always the intercept).
pub fn select_terms(basis: &BasisSpec, flags: &[bool]) -> Result<BasisSpec> {
    if flags.len() != basis.p() {
        return invalid(format!("{} flags for {} active terms", flags.len(), basis.p()));
    }
    let mut mask = basis.active_mask.clone();
    let mut k = 0;
    for m in mask.iter_mut() {
        if *m {
            *m = flags[k];
            k += 1;
        }
    }
    basis.with_mask(&mask)
}

/// Evenly spaced `nu` values `step, 2 step, ..., max` (zero left out).
pub fn nu_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max >= step) {
        return invalid(format!("bad nu grid: max {max}, step {step}"));
    }
    let count = (max / step + 1e-9).floor() as usize;
    Ok((1..=count).map(|k| (k as f64 * step * 1e10).round() / 1e10).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// Mean held-out standardized RMSPE per grid value.
    pub scores: Vec<f64>,
    pub best_nu: f64,
}

/// Cap on outer epochs for the cross-validation fits.
pub const CV_MAX_OUTER: usize = 100;

/// Fold index per row after a seeded shuffle.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        fold[i] = pos % folds;
    }
    fold
}

/// K-fold CV of the shrinkage scale with MAP fits; each fold walks the grid
/// in order, warm-starting from the previous value's mode.
pub fn cv_select_nu(
    data: &Dataset,
    basis: &BasisSpec,
    prior: &PriorConfig,
    grid: &[f64],
    folds: usize,
    settings: &FitSettings,
    seed: u64,
) -> Result<CvResult> {
    if !prior.is_informative() {
        return invalid("cross-validating nu needs the informative beta prior");
    }
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0)) {
        return invalid("nu grid must be non-empty and strictly positive");
    }
    if folds < 2 || data.n() < folds {
        return invalid(format!("need 2 <= folds <= n, got {folds} folds for n = {}", data.n()));
    }
    let assign = fold_assignment(data.n(), folds, seed);
    let config = EviConfig { max_outer: settings.config.max_outer.min(CV_MAX_OUTER), ..*settings.config };
    let fold_settings = FitSettings { config: &config, step_size: settings.step_size, init: settings.init, scale: settings.scale };

    let per_fold: Vec<Vec<f64>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..data.n()).filter(|&i| assign[i] != f).collect();
            let test: Vec<usize> = (0..data.n()).filter(|&i| assign[i] == f).collect();
            let (tr, te) = (data.select(&train), data.select(&test));
            if test.len() < 2 {
                return invalid(format!("fold {f} has fewer than two held-out points"));
            }
            let mut start: Option<Vec<f64>> = None;
            let mut scores = Vec::with_capacity(grid.len());
            for &nu in grid {
                let fit = fit_map(&tr, basis, &prior.with_nu(nu), &fold_settings, start.as_deref())?;
                start = fit.mode.as_ref().map(|m| m.coords());
                let preds = predict_aggregate(&fit, &te.x)?;
                let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
                scores.push(standardized_rmspe(&mean, te.y.as_slice())?);
                debug!("fold {f} nu {nu}: score {}", scores.last().unwrap());
            }
            Ok(scores)
        })
        .collect::<Result<_>>()?;

    let scores: Vec<f64> =
        (0..grid.len()).map(|k| per_fold.iter().map(|s| s[k]).sum::<f64>() / folds as f64).collect();
    let best = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (k, &s)| if s < acc.1 { (k, s) } else { acc })
        .0;
    info!("cv: best nu {} (score {})", grid[best], scores[best]);
    Ok(CvResult { grid: grid.to_vec(), scores, best_nu: grid[best] })
}

/// CSV with header `nu,cv_rmspe`.
pub fn write_cv<W: Write>(w: W, cv: &CvResult) -> Result<()> {
    let m = DMatrix::from_fn(cv.grid.len(), 2, |i, j| if j == 0 { cv.grid[i] } else { cv.scores[i] });
    crate::csvio::write_matrix(w, &["nu".to_string(), "cv_rmspe".to_string()], &m)
}
