use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evigp::basis::{build_basis, BasisSpec};
use evigp::benchmarks::BenchmarkName;
use evigp::evi::{EviConfig, ParticleScale};
use evigp::experiment::{BenchmarkSetup, BetaSetup, MethodSetup, PriorSetup, SelectionOptions};
use evigp::inference::{nu_grid, FitMode, InitBox};
use evigp::posterior::GammaPrior;
use serde::Deserialize;

/// One mean model: a polynomial degree, optionally restricted to named terms.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub label: Option<String>,
    pub degree: u32,
    /// Term labels to keep (e.g. `["1", "x1", "x1*x4"]`); the intercept stays regardless.
    pub terms: Option<Vec<String>>,
}

impl ModelConfig {
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        let base = match self.degree {
            0 => "constant",
            1 => "linear",
            _ => "quadratic",
        };
        if self.terms.is_some() {
            format!("{base}-selected")
        } else {
            base.to_string()
        }
    }

    pub fn basis(&self, d: usize) -> Result<BasisSpec> {
        let full = build_basis(d, self.degree)?;
        let Some(terms) = &self.terms else { return Ok(full) };
        let labels = full.labels();
        for t in terms {
            if !labels.contains(t) {
                bail!("unknown term '{t}' for degree {} in dimension {d} (known: {})", self.degree, labels.join(", "));
            }
        }
        let mask: Vec<bool> = labels.iter().map(|l| terms.contains(l)).collect();
        Ok(full.with_mask(&mask)?)
    }
}

/// Overrides applied on top of the method defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodOverride {
    pub mode: Option<FitMode>,
    pub n_particles: Option<usize>,
    pub h: Option<f64>,
    pub step_size: Option<f64>,
    pub init: Option<InitBox>,
    pub scale: Option<ParticleScale>,
    pub evi: Option<EviConfig>,
}

impl MethodOverride {
    fn apply(&self, m: &mut MethodSetup) {
        if let Some(v) = self.mode {
            m.mode = v;
        }
        if let Some(v) = self.n_particles {
            m.n_particles = v;
        }
        if let Some(v) = self.h {
            m.h = v;
        }
        if let Some(v) = self.step_size {
            m.step_size = v;
        }
        if let Some(v) = &self.init {
            m.init = v.clone();
        }
        if let Some(v) = self.scale {
            m.scale = v;
        }
        if let Some(v) = self.evi {
            m.evi = v;
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    /// Cross-validate `nu`; otherwise the prior's `nu` is used throughout.
    pub cv: bool,
    pub grid_max: f64,
    pub grid_step: f64,
    pub folds: usize,
    pub level: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self { cv: true, grid_max: 5.0, grid_step: 0.05, folds: 5, level: 0.95 }
    }
}

/// Contents of the `--config` file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub benchmark: Option<BenchmarkName>,
    /// Training CSV (`x1,...,xd,y`); takes precedence over `benchmark` for
    /// fit, select and cv-nu.
    pub dataset: Option<PathBuf>,
    pub models: Vec<ModelConfig>,
    pub reps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub test_noise: Option<bool>,
    pub prior: Option<PriorSetup>,
    pub method: MethodOverride,
    pub selection: SelectionConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            benchmark: None,
            dataset: None,
            models: vec![ModelConfig { label: None, degree: 0, terms: None }],
            reps: 1,
            seed: 0,
            out: PathBuf::from("evigp-out"),
            threads: None,
            test_noise: None,
            prior: None,
            method: MethodOverride::default(),
            selection: SelectionConfig::default(),
        }
    }
}

/// Defaults for a user dataset without a benchmark preset.
fn generic_prior() -> PriorSetup {
    PriorSetup {
        omega: vec![GammaPrior::new(1.0, 0.5)],
        eta: GammaPrior::new(1.0, 0.5),
        df_tau2: 0.0,
        beta: BetaSetup::Flat,
    }
}

fn generic_method() -> MethodSetup {
    MethodSetup {
        mode: FitMode::Map,
        n_particles: 100,
        h: 0.02,
        step_size: 1.0,
        init: InitBox::uniform((0.0, 0.1), (0.0, 0.1)),
        scale: ParticleScale::Log,
        evi: EviConfig::default(),
    }
}

impl ExperimentConfig {
    /// Parses a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        if cfg.out.is_relative() {
            cfg.out = base.join(&cfg.out);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.benchmark.is_none() && self.dataset.is_none() {
            bail!("config needs either `benchmark` or `dataset`");
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() {
                bail!("dataset {} does not exist", d.display());
            }
        }
        if self.models.is_empty() {
            bail!("config lists no models");
        }
        if self.reps == 0 {
            bail!("reps must be at least 1");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        let s = &self.selection;
        if !(s.level > 0.0 && s.level < 1.0) || s.folds < 2 {
            bail!("selection needs 0 < level < 1 and folds >= 2");
        }
        self.setup()?.validate()?;
        Ok(())
    }

    /// Benchmark setup with the file's overrides applied. Without a benchmark
    /// the toy spec stands in for the data-generating fields, which are unused.
    pub fn setup(&self) -> Result<BenchmarkSetup> {
        let mut setup = match self.benchmark {
            Some(name) => BenchmarkSetup::preset(name),
            None => {
                let mut s = BenchmarkSetup::preset(BenchmarkName::Toy);
                s.prior = generic_prior();
                s.method = generic_method();
                s
            }
        };
        if let Some(p) = &self.prior {
            setup.prior = p.clone();
        }
        self.method.apply(&mut setup.method);
        if let Some(t) = self.test_noise {
            setup.test_noise = t;
        }
        Ok(setup)
    }

    pub fn selection_options(&self) -> Result<SelectionOptions> {
        let s = &self.selection;
        let grid = if s.cv { Some(nu_grid(s.grid_max, s.grid_step)?) } else { None };
        Ok(SelectionOptions { grid, folds: s.folds, level: s.level, seed: self.seed })
    }
}
