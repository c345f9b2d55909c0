use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evigp::basis::BasisSpec;
use evigp::csvio;
use evigp::evi::write_trace;
use evigp::experiment::{
    replication_data, run_benchmark, select_pipeline, write_replications, write_summary, SelectionOutcome,
};
use evigp::inference::{
    beta_intervals, cv_select_nu, nu_grid, predict_aggregate, write_cv, write_intervals, write_predictions,
    FitResult,
};
use evigp::Dataset;
use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const ARTIFACT_FORMAT: u32 = 1;

/// Conditional `beta` posterior at one hyperparameter point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BetaSummary {
    pub beta_hat: Vec<f64>,
    /// Row-major `p x p`.
    pub sigma_beta: Vec<f64>,
}

/// On-disk fit: the model state plus the `beta` conditionals per point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitArtifact {
    pub format: u32,
    pub terms: Vec<String>,
    pub fit: FitResult,
    pub beta: Vec<BetaSummary>,
}

impl FitArtifact {
    pub fn new(fit: FitResult) -> Result<Self> {
        let beta = fit
            .conditionals()?
            .iter()
            .map(|c| BetaSummary {
                beta_hat: c.beta.beta_hat.iter().copied().collect(),
                sigma_beta: c.beta.sigma_beta.transpose().iter().copied().collect(),
            })
            .collect();
        Ok(Self { format: ARTIFACT_FORMAT, terms: fit.basis.active_labels(), fit, beta })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening fit artifact {}", path.display()))?;
        let art: Self = serde_json::from_reader(BufReader::new(file))
            .with_context(|| format!("reading fit artifact {}", path.display()))?;
        if art.format != ARTIFACT_FORMAT {
            bail!("fit artifact format {} is not supported (expected {ARTIFACT_FORMAT})", art.format);
        }
        art.fit.validate()?;
        Ok(art)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(w.flush()?)
}

/// Hyperparameter points in log coordinates, one row per particle (or the mode).
fn write_points(dir: &Path, fit: &FitResult) -> Result<()> {
    let pts = fit.points()?;
    let d = fit.data.d();
    let mut header: Vec<String> = (1..=d).map(|j| format!("log_omega{j}")).collect();
    header.push("log_eta".into());
    if fit.prior.is_informative() {
        header.push("log_tau2".into());
    }
    let rows: Vec<Vec<f64>> = pts.iter().map(|p| p.coords()).collect();
    let m = DMatrix::from_fn(rows.len(), header.len(), |i, j| rows[i][j]);
    let mut w = create(dir, "points.csv")?;
    csvio::write_matrix(&mut w, &header, &m)?;
    Ok(w.flush()?)
}

fn save_fit(dir: &Path, prefix: &str, fit: &FitResult, level: f64, seed: u64) -> Result<()> {
    write_json(dir, &format!("{prefix}fit.json"), &FitArtifact::new(fit.clone())?)?;
    let mut w = create(dir, &format!("{prefix}trace.csv"))?;
    write_trace(&mut w, &fit.trace)?;
    w.flush()?;
    let mut w = create(dir, &format!("{prefix}intervals.csv"))?;
    write_intervals(&mut w, &beta_intervals(fit, level, seed)?)?;
    Ok(w.flush()?)
}

/// Training data from the configured CSV, or replication 0 of the benchmark.
fn training_data(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let data = match &cfg.dataset {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
            Dataset::read_csv(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))?
        }
        None => replication_data(&cfg.setup()?, 0, cfg.seed)?.train,
    };
    let mut w = create(out, "train.csv")?;
    data.write_csv(&mut w)?;
    w.flush()?;
    Ok(data)
}

fn single_model(cfg: &ExperimentConfig, d: usize) -> Result<BasisSpec> {
    if cfg.models.len() > 1 {
        info!("using the first of {} configured models", cfg.models.len());
    }
    cfg.models[0].basis(d)
}

pub fn prepare_out(out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(out.to_path_buf())
}

pub fn fit(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = training_data(cfg, out)?;
    let basis = single_model(cfg, data.d())?;
    let setup = cfg.setup()?;
    let prior = setup.prior.build(&basis)?;
    let fit = setup.method.fit(&data, &basis, &prior, cfg.seed)?;
    if let Some(w) = &fit.warning {
        log::warn!("{w}");
    }
    write_points(out, &fit)?;
    save_fit(out, "", &fit, cfg.selection.level, cfg.seed)?;
    println!(
        "fit ({:?}) finished after {} epochs, converged: {}; artifacts in {}",
        fit.mode_kind,
        fit.trace.len().saturating_sub(1),
        fit.converged,
        out.display()
    );
    Ok(())
}

pub fn predict(fit_path: &Path, query: &Path, output: &Path) -> Result<()> {
    let art = FitArtifact::load(fit_path)?;
    let f = File::open(query).with_context(|| format!("opening query file {}", query.display()))?;
    let (header, xq) =
        csvio::read_matrix(BufReader::new(f)).with_context(|| format!("reading query file {}", query.display()))?;
    let d = art.fit.data.d();
    if header.len() != d {
        bail!("query file has {} columns but the fit expects {d} inputs", header.len());
    }
    let preds = if xq.nrows() == 0 { Vec::new() } else { predict_aggregate(&art.fit, &xq)? };
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(output).with_context(|| format!("creating {}", output.display()))?);
    write_predictions(&mut w, &preds)?;
    w.flush()?;
    println!("{} predictions written to {}", preds.len(), output.display());
    Ok(())
}

pub fn benchmark(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let Some(name) = cfg.benchmark else { bail!("benchmark runs need `benchmark` in the config") };
    let setup = cfg.setup()?;
    let mut reports = Vec::new();
    for model in &cfg.models {
        let basis = model.basis(setup.spec.d)?;
        let label = model.label();
        info!("{name}: {label}, {} replications", cfg.reps);
        reports.push(run_benchmark(&setup, &basis, cfg.reps, cfg.seed, &label)?);
    }
    let mut w = create(out, "replications.csv")?;
    write_replications(&mut w, &reports)?;
    w.flush()?;
    let mut w = create(out, "summary.csv")?;
    write_summary(&mut w, &reports)?;
    w.flush()?;
    println!("{name}: {:?}, {} replications", setup.method.mode, cfg.reps);
    println!("{:<22} {:>12} {:>12} {:>9}", "model", "mean", "median", "failures");
    for r in &reports {
        let s = &r.summary;
        println!("{:<22} {:>12.6} {:>12.6} {:>9}", r.label, s.mean, s.median, s.failures);
    }
    Ok(())
}

#[derive(Serialize)]
struct SelectionSummary<'a> {
    nu_full: f64,
    nu_reduced: f64,
    flagged: Vec<&'a str>,
    selected_terms: Vec<String>,
}

pub fn select(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = training_data(cfg, out)?;
    let basis = single_model(cfg, data.d())?;
    let setup = cfg.setup()?;
    let opts = cfg.selection_options()?;
    match select_pipeline(&data, &basis, &setup.prior, &setup.method, &opts)? {
        SelectionOutcome::NothingToSelect(msg) => {
            println!("{msg}");
        }
        SelectionOutcome::Selected(rep) => {
            if let Some(cv) = &rep.cv_full {
                let mut w = create(out, "cv_full.csv")?;
                write_cv(&mut w, cv)?;
                w.flush()?;
            }
            if let Some(cv) = &rep.cv_reduced {
                let mut w = create(out, "cv_reduced.csv")?;
                write_cv(&mut w, cv)?;
                w.flush()?;
            }
            save_fit(out, "full_", &rep.fit_full, opts.level, opts.seed)?;
            save_fit(out, "reduced_", &rep.fit_reduced, opts.level, opts.seed)?;
            let flagged: Vec<&str> = rep.intervals.iter().filter(|iv| iv.flagged).map(|iv| iv.label.as_str()).collect();
            let summary = SelectionSummary {
                nu_full: rep.nu_full,
                nu_reduced: rep.nu_reduced,
                flagged: flagged.clone(),
                selected_terms: rep.selected.active_labels(),
            };
            write_json(out, "selection.json", &summary)?;
            println!("nu (full model): {}", rep.nu_full);
            println!("flagged terms: {}", if flagged.is_empty() { "none".into() } else { flagged.join(", ") });
            println!("selected model: {}", rep.selected.active_labels().join(", "));
            println!("nu (selected model): {}", rep.nu_reduced);
        }
    }
    Ok(())
}

pub fn cv_nu(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = training_data(cfg, out)?;
    let basis = single_model(cfg, data.d())?;
    let setup = cfg.setup()?;
    let prior = setup.prior.build(&basis)?;
    let s = &cfg.selection;
    let grid = nu_grid(s.grid_max, s.grid_step)?;
    let cv = cv_select_nu(&data, &basis, &prior, &grid, s.folds, &setup.method.settings(), cfg.seed)?;
    let mut w = create(out, "cv.csv")?;
    write_cv(&mut w, &cv)?;
    w.flush()?;
    println!("best nu: {}", cv.best_nu);
    Ok(())
}
