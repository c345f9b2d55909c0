//! Replication studies on the benchmark problems and the
//! interval-based term selection workflow.

use std::io::Write;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{build_basis, BasisSpec};
use crate::benchmarks::{make_dataset, standardized_rmspe, BenchmarkName, BenchmarkSpec};
use crate::csvio::fmt_g17;
use crate::data::Dataset;
use crate::designs::{maximin_lhs, random_lhs_with};
use crate::error::{invalid, Result};
use crate::evi::{EviConfig, ParticleScale};
use crate::inference::{
    beta_intervals, cv_select_nu, fit_map, fit_post, predict_aggregate, select_terms, BetaInterval, CvResult,
    FitMode, FitResult, FitSettings, InitBox,
};
use crate::posterior::{GammaPrior, PriorConfig};

/// Prior on `beta`, before a basis is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BetaSetup {
    Flat,
    Informative { nu: f64, r: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSetup {
    /// One prior shared by every `omega_j`, or one per input.
    pub omega: Vec<GammaPrior>,
    pub eta: GammaPrior,
    pub df_tau2: f64,
    pub beta: BetaSetup,
}

impl PriorSetup {
    pub fn build(&self, basis: &BasisSpec) -> Result<PriorConfig> {
        let d = basis.d;
        let omega = match self.omega.len() {
            1 => vec![self.omega[0]; d],
            k if k == d => self.omega.clone(),
            k => return invalid(format!("{k} omega priors for input dimension {d}")),
        };
        let prior = match self.beta {
            BetaSetup::Flat => PriorConfig::non_informative(omega, self.eta, self.df_tau2),
            BetaSetup::Informative { nu, r } => {
                PriorConfig::informative(omega, self.eta, self.df_tau2, nu, basis, r)?
            }
        };
        prior.validate(d, basis.p())?;
        Ok(prior)
    }

    pub fn nu(&self) -> Option<f64> {
        match self.beta {
            BetaSetup::Flat => None,
            BetaSetup::Informative { nu, .. } => Some(nu),
        }
    }

    pub fn with_nu(&self, nu: f64) -> Self {
        let mut out = self.clone();
        if let BetaSetup::Informative { r, .. } = self.beta {
            out.beta = BetaSetup::Informative { nu, r };
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSetup {
    pub mode: FitMode,
    pub n_particles: usize,
    pub h: f64,
    pub step_size: f64,
    pub init: InitBox,
    #[serde(default)]
    pub scale: ParticleScale,
    #[serde(default)]
    pub evi: EviConfig,
}

impl MethodSetup {
    pub fn validate(&self) -> Result<()> {
        self.evi.validate()?;
        if self.n_particles == 0 {
            return invalid("need at least one particle");
        }
        if !(self.h > 0.0 && self.step_size > 0.0) {
            return invalid(format!("bandwidth and step size must be positive, got h={} step={}", self.h, self.step_size));
        }
        Ok(())
    }

    pub fn settings(&self) -> FitSettings<'_> {
        FitSettings { config: &self.evi, step_size: self.step_size, init: &self.init, scale: self.scale }
    }

    /// Fits `data` with this method; `seed` drives the particle initialization.
    pub fn fit(&self, data: &Dataset, basis: &BasisSpec, prior: &PriorConfig, seed: u64) -> Result<FitResult> {
        match self.mode {
            FitMode::Map => fit_map(data, basis, prior, &self.settings(), None),
            FitMode::Post => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                fit_post(data, basis, prior, &self.settings(), self.n_particles, self.h, &mut rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSetup {
    pub spec: BenchmarkSpec,
    pub prior: PriorSetup,
    pub method: MethodSetup,
    /// Score against noisy test responses instead of the true function.
    #[serde(default)]
    pub test_noise: bool,
    /// Random restarts of the maximin training design.
    #[serde(default = "default_restarts")]
    pub design_restarts: usize,
}

fn default_restarts() -> usize {
    10
}

impl BenchmarkSetup {
    /// Settings used for the published experiments. Gamma priors are given
    /// as `(shape, scale)`.
    pub fn preset(name: BenchmarkName) -> Self {
        let spec = BenchmarkSpec::by_name(name);
        match name {
            BenchmarkName::Toy => Self {
                prior: PriorSetup {
                    omega: vec![GammaPrior::from_scale(1.0, 0.5)],
                    eta: GammaPrior::from_scale(1.0, 0.5),
                    df_tau2: 0.0,
                    beta: BetaSetup::Flat,
                },
                method: MethodSetup {
                    mode: FitMode::Post,
                    n_particles: 100,
                    h: 0.02,
                    step_size: 1.0,
                    init: InitBox::uniform((0.0, 0.1), (0.1, 0.4)),
                    scale: ParticleScale::Log,
                    evi: EviConfig::default(),
                },
                spec,
                test_noise: false,
                design_restarts: default_restarts(),
            },
            BenchmarkName::Otl | BenchmarkName::Borehole => {
                let mut omega = vec![GammaPrior::from_scale(1.0, 2.0); spec.d];
                omega[0] = GammaPrior::from_scale(4.0, 2.0);
                let nu = if name == BenchmarkName::Otl { 4.35 } else { 4.55 };
                Self {
                    prior: PriorSetup {
                        omega,
                        eta: GammaPrior::from_scale(1.0, 2.0),
                        df_tau2: 7.0,
                        beta: BetaSetup::Informative { nu, r: 1.0 / 3.0 },
                    },
                    method: MethodSetup {
                        mode: FitMode::Map,
                        n_particles: 100,
                        h: 0.001,
                        step_size: 0.1,
                        init: InitBox::uniform((0.0, 0.1), (0.0, 0.1)),
                        scale: ParticleScale::Log,
                        evi: EviConfig::default(),
                    },
                    spec,
                    test_noise: false,
                    design_restarts: default_restarts(),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.method.validate()
    }
}

/// Training set and test sets of one replication.
#[derive(Debug, Clone)]
pub struct ReplicationData {
    pub seed: u64,
    pub train: Dataset,
    pub tests: Vec<Dataset>,
}

/// Data for replication `rep`, seeded with `seed_base + rep`. The training
/// design is a maximin LHS, test designs are random LHS.
pub fn replication_data(setup: &BenchmarkSetup, rep: usize, seed_base: u64) -> Result<ReplicationData> {
    let spec = &setup.spec;
    let seed = seed_base.wrapping_add(rep as u64);
    let design = maximin_lhs(spec.train_size, spec.d, seed, setup.design_restarts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = make_dataset(spec, &design.points, spec.noise_sd, &mut rng)?;
    let test_sd = if setup.test_noise { spec.noise_sd } else { 0.0 };
    let tests = (0..spec.test_sets)
        .map(|_| {
            let x = random_lhs_with(spec.test_size, spec.d, &mut rng)?;
            make_dataset(spec, &x, test_sd, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(ReplicationData { seed, train, tests })
}

/// Mean standardized RMSPE of the fit's predictive means over the test sets.
pub fn score_fit(fit: &FitResult, tests: &[Dataset]) -> Result<f64> {
    if tests.is_empty() {
        return invalid("no test sets to score");
    }
    let mut total = 0.0;
    for t in tests {
        let mean: Vec<f64> = predict_aggregate(fit, &t.x)?.iter().map(|p| p.mean).collect();
        total += standardized_rmspe(&mean, t.y.as_slice())?;
    }
    Ok(total / tests.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub rep: usize,
    pub seed: u64,
    pub rmspe: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

pub fn run_replication(setup: &BenchmarkSetup, basis: &BasisSpec, rep: usize, seed_base: u64) -> ReplicationOutcome {
    let seed = seed_base.wrapping_add(rep as u64);
    let result = (|| {
        let data = replication_data(setup, rep, seed_base)?;
        let prior = setup.prior.build(basis)?;
        let fit = setup.method.fit(&data.train, basis, &prior, seed)?;
        Ok::<_, crate::GpError>((score_fit(&fit, &data.tests)?, fit.converged))
    })();
    match result {
        Ok((rmspe, converged)) => {
            info!("replication {rep}: rmspe {rmspe:.6}");
            ReplicationOutcome { rep, seed, rmspe: Some(rmspe), converged, error: None }
        }
        Err(e) => {
            warn!("replication {rep} failed: {e}");
            ReplicationOutcome { rep, seed, rmspe: None, converged: false, error: Some(e.to_string()) }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub failures: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(outcomes: &[ReplicationOutcome]) -> Self {
        let mut v: Vec<f64> = outcomes.iter().filter_map(|o| o.rmspe).collect();
        v.sort_by(f64::total_cmp);
        let failures = outcomes.len() - v.len();
        if v.is_empty() {
            let nan = f64::NAN;
            return Self { count: 0, failures, mean: nan, min: nan, q1: nan, median: nan, q3: nan, max: nan };
        }
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Self {
            count: v.len(),
            failures,
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: v[v.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub label: String,
    pub outcomes: Vec<ReplicationOutcome>,
    pub summary: Summary,
}

/// `reps` independent replications, run in parallel. Failed replications are
/// logged and counted, not fatal.
pub fn run_benchmark(
    setup: &BenchmarkSetup,
    basis: &BasisSpec,
    reps: usize,
    seed_base: u64,
    label: &str,
) -> Result<BenchmarkReport> {
    setup.validate()?;
    if reps == 0 {
        return invalid("need at least one replication");
    }
    let outcomes: Vec<ReplicationOutcome> =
        (0..reps).into_par_iter().map(|r| run_replication(setup, basis, r, seed_base)).collect();
    let summary = Summary::of(&outcomes);
    if summary.failures > 0 {
        warn!("{label}: {} of {reps} replications failed", summary.failures);
    }
    Ok(BenchmarkReport { label: label.to_string(), outcomes, summary })
}

/// CSV with header `model,rep,seed,rmspe,converged` (box-plot data). Failed
/// replications have an empty RMSPE.
pub fn write_replications<W: Write>(mut w: W, reports: &[BenchmarkReport]) -> Result<()> {
    writeln!(w, "model,rep,seed,rmspe,converged")?;
    for r in reports {
        for o in &r.outcomes {
            let v = o.rmspe.map(fmt_g17).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.label, o.rep, o.seed, v, u8::from(o.converged))?;
        }
    }
    Ok(())
}

/// CSV with header `model,count,failures,mean,min,q1,median,q3,max`.
pub fn write_summary<W: Write>(mut w: W, reports: &[BenchmarkReport]) -> Result<()> {
    writeln!(w, "model,count,failures,mean,min,q1,median,q3,max")?;
    for r in reports {
        let s = &r.summary;
        let cells = [s.mean, s.min, s.q1, s.median, s.q3, s.max].map(fmt_g17).join(",");
        writeln!(w, "{},{},{},{}", r.label, s.count, s.failures, cells)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOptions {
    /// Grid for the two cross-validations of `nu`; `None` keeps the prior's `nu`.
    pub grid: Option<Vec<f64>>,
    pub folds: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self { grid: None, folds: 5, level: 0.95, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub cv_full: Option<CvResult>,
    pub nu_full: f64,
    pub fit_full: FitResult,
    pub intervals: Vec<BetaInterval>,
    pub selected: BasisSpec,
    pub cv_reduced: Option<CvResult>,
    pub nu_reduced: f64,
    pub fit_reduced: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectionOutcome {
    NothingToSelect(String),
    Selected(Box<SelectionReport>),
}

/// CV for `nu` on the full basis, fit, interval report, mask, CV again on the
/// reduced basis, refit.
pub fn select_pipeline(
    data: &Dataset,
    basis: &BasisSpec,
    prior: &PriorSetup,
    method: &MethodSetup,
    opts: &SelectionOptions,
) -> Result<SelectionOutcome> {
    let Some(nu0) = prior.nu() else {
        return invalid("term selection needs the informative beta prior");
    };
    if basis.p() <= 1 {
        return Ok(SelectionOutcome::NothingToSelect(format!(
            "the basis has {} active term(s); only the intercept could be kept, nothing to select",
            basis.p()
        )));
    }
    method.validate()?;
    let choose = |b: &BasisSpec| -> Result<(Option<CvResult>, f64)> {
        match &opts.grid {
            None => Ok((None, nu0)),
            Some(grid) => {
                let cv = cv_select_nu(data, b, &prior.build(b)?, grid, opts.folds, &method.settings(), opts.seed)?;
                let nu = cv.best_nu;
                Ok((Some(cv), nu))
            }
        }
    };

    let (cv_full, nu_full) = choose(basis)?;
    let fit_full = method.fit(data, basis, &prior.with_nu(nu_full).build(basis)?, opts.seed)?;
    let intervals = beta_intervals(&fit_full, opts.level, opts.seed)?;
    let flags: Vec<bool> = intervals.iter().map(|iv| iv.flagged).collect();
    let selected = select_terms(basis, &flags)?;
    info!("selected terms: {:?}", selected.active_labels());

    let (cv_reduced, nu_reduced) = choose(&selected)?;
    let fit_reduced = method.fit(data, &selected, &prior.with_nu(nu_reduced).build(&selected)?, opts.seed)?;
    Ok(SelectionOutcome::Selected(Box::new(SelectionReport {
        cv_full,
        nu_full,
        fit_full,
        intervals,
        selected,
        cv_reduced,
        nu_reduced,
        fit_reduced,
    })))
}

/// Full polynomial basis of `degree` for the benchmark's dimension.
pub fn benchmark_basis(setup: &BenchmarkSetup, degree: u32) -> Result<BasisSpec> {
    build_basis(setup.spec.d, degree)
}
